// The two-stage grading workspace. Stage one (Blind): the reviewer sees the
// essay and rubric only and enters independent scores. The AI panel is not
// merely hidden, it is absent from every payload until the initial scores
// are accepted by the server; the reveal renders whatever that response
// carries. Stage two (Revealed): the reviewer may revise, then the task is
// posted as completed with both score sets and per-stage elapsed times.

import type { AiFeedback, Client, TaskView } from "./api.js";
import { ApiError } from "./api.js";
import { clear, h } from "./dom.js";
import type { Rubric, ScoreVector } from "./rubric.js";
import {
  confidenceBadge,
  fieldError,
  overallError,
  overallFromDimensions,
  validateScores,
} from "./rubric.js";
import { StageTimer } from "./timer.js";

export class Workspace {
  private task: TaskView | null = null;
  readonly timer: StageTimer;

  constructor(
    private readonly root: HTMLElement,
    private readonly client: Client,
    private readonly rubric: Rubric,
    private readonly reviewerId: string,
    timer?: StageTimer,
    private readonly onDone: (task: TaskView) => void = () => {},
  ) {
    this.timer = timer ?? new StageTimer();
  }

  get stage(): string {
    return this.task?.stage ?? "Idle";
  }

  open(task: TaskView): void {
    this.task = task;
    if (task.stage === "Blind") this.timer.start("initial");
    else if (task.stage === "Revealed") this.timer.start("revise");
    this.render();
  }

  private render(): void {
    clear(this.root);
    const task = this.task;
    if (!task) return;
    this.root.append(
      h("h2", {}, `Task ${task.task_id} — essay ${task.essay_id}`),
      h(
        "p",
        { class: "stage-indicator", "data-stage": task.stage },
        `Stage: ${task.stage}`,
      ),
      h("pre", { class: "essay-text" }, task.essay_text),
      h("details", { class: "rubric-summary" },
        h("summary", {}, "Rubric"),
        h("pre", {}, this.rubric.guideline_text ||
          this.rubric.dimensions
            .map((d) => `${d.name}: ${d.min}-${d.max}`)
            .join("\n")),
      ),
    );
    if (task.stage === "Blind") {
      this.root.append(this.scoreForm("initial", null));
    } else if (task.stage === "Revealed") {
      this.root.append(this.aiPanel(task.ai_feedback ?? null));
      this.root.append(this.scoreForm("revise", task.initial_human_scores));
    } else {
      this.root.append(this.aiPanel(task.ai_feedback ?? null));
      this.root.append(
        h("p", { class: "done-note" }, "Review completed. Thank you!"),
      );
    }
  }

  /** AI panel: per-dimension scores, confidence badge, explanation text. */
  private aiPanel(feedback: AiFeedback | null): HTMLElement {
    if (!feedback) {
      return h("div", { class: "ai-panel ai-panel-missing" },
        "AI feedback unavailable for this task.");
    }
    const scores = feedback.slow_scores ?? feedback.fast_scores;
    const rows = this.rubric.dimensions.map((d) =>
      h("li", {}, `${d.name}: ${scores.per_dimension[d.name] ?? "-"}`),
    );
    rows.push(h("li", {}, `Overall: ${scores.overall}`));
    const badge = confidenceBadge(feedback.confidence);
    return h("div", { class: "ai-panel" },
      h("h3", {}, "AI feedback"),
      h("ul", { class: "ai-scores" }, ...rows),
      h(
        "span",
        { class: `confidence-badge badge-${badge}` },
        `confidence ${feedback.confidence.toFixed(3)} (${badge})`,
      ),
      h("pre", { class: "ai-explanation" }, feedback.explanation ?? ""),
    );
  }

  private scoreForm(
    kind: "initial" | "revise",
    prefill: ScoreVector | null,
  ): HTMLElement {
    const form = h("form", { class: `score-form score-form-${kind}` });
    const inputs = new Map<string, HTMLInputElement>();
    const overallInput = h("input", {
      type: "number",
      name: "overall",
      class: "score-overall",
    }) as HTMLInputElement;

    const syncOverall = () => {
      if (!this.rubric.sum_constraint) return;
      const perDim: Record<string, number> = {};
      for (const [name, input] of inputs) {
        perDim[name] = Number(input.value);
      }
      overallInput.value = String(
        overallFromDimensions(this.rubric, perDim),
      );
    };

    for (const dim of this.rubric.dimensions) {
      const input = h("input", {
        type: "number",
        name: dim.name,
        min: String(dim.min),
        max: String(dim.max),
        oninput: () => {
          const message = fieldError(dim, Number(input.value));
          errorFor(dim.name).textContent = message ?? "";
          syncOverall();
        },
      }) as HTMLInputElement;
      if (prefill) input.value = String(prefill.per_dimension[dim.name] ?? "");
      inputs.set(dim.name, input);
      form.append(
        h("label", {}, `${dim.name} (${dim.min}-${dim.max}) `, input),
        h("span", { class: "field-error", "data-field": dim.name }),
      );
    }
    if (this.rubric.sum_constraint && this.rubric.dimensions.length > 0) {
      overallInput.readOnly = true;
      overallInput.classList.add("auto-sum");
    }
    if (prefill) overallInput.value = String(prefill.overall);
    form.append(
      h("label", {}, "Overall ", overallInput),
      h("span", { class: "field-error", "data-field": "overall" }),
      h("div", { class: "form-errors" }),
      h(
        "button",
        { type: "submit" },
        kind === "initial" ? "Submit independent scores" : "Submit revision",
      ),
    );
    syncOverall();
    if (prefill) syncOverall();

    const errorFor = (field: string): HTMLElement =>
      form.querySelector(`.field-error[data-field="${field}"]`) as HTMLElement;

    form.addEventListener("submit", (event) => {
      event.preventDefault();
      void this.submit(kind, form, inputs, overallInput);
    });
    return form;
  }

  private collectScores(
    inputs: Map<string, HTMLInputElement>,
    overallInput: HTMLInputElement,
  ): ScoreVector {
    const perDimension: Record<string, number> = {};
    for (const [name, input] of inputs) {
      perDimension[name] = Number(input.value);
    }
    return { overall: Number(overallInput.value), per_dimension: perDimension };
  }

  private async submit(
    kind: "initial" | "revise",
    form: HTMLElement,
    inputs: Map<string, HTMLInputElement>,
    overallInput: HTMLInputElement,
  ): Promise<void> {
    const task = this.task;
    if (!task) return;
    const scores = this.collectScores(inputs, overallInput);

    // client-side validation mirrors the server's rules field by field
    let blocked = false;
    for (const dim of this.rubric.dimensions) {
      const message = fieldError(dim, scores.per_dimension[dim.name]);
      const slot = form.querySelector(
        `.field-error[data-field="${dim.name}"]`,
      ) as HTMLElement;
      slot.textContent = message ?? "";
      blocked = blocked || message !== null;
    }
    const overallMessage = overallError(this.rubric, scores.overall);
    (form.querySelector(
      '.field-error[data-field="overall"]',
    ) as HTMLElement).textContent = overallMessage ?? "";
    blocked = blocked || overallMessage !== null;
    const problems = validateScores(this.rubric, scores);
    const errorBox = form.querySelector(".form-errors") as HTMLElement;
    if (blocked || problems.length > 0) {
      errorBox.textContent = problems.join("; ");
      return;
    }
    errorBox.textContent = "";

    try {
      if (kind === "initial") {
        const elapsed = this.timer.elapsedSeconds("initial");
        this.timer.stop();
        const updated = await this.client.submitInitial(
          task.task_id,
          this.reviewerId,
          scores,
          elapsed,
        );
        this.task = updated;
        this.timer.start("revise");
      } else {
        const elapsed = this.timer.elapsedSeconds("revise");
        this.timer.stop();
        const updated = await this.client.submitReview(
          task.task_id,
          this.reviewerId,
          scores,
          elapsed,
        );
        this.task = updated;
        this.onDone(updated);
      }
      this.render();
    } catch (error) {
      if (error instanceof ApiError) {
        errorBox.textContent = Array.isArray(error.detail)
          ? error.detail.join("; ")
          : String(error.detail);
      } else {
        errorBox.textContent = "network failure — please retry";
      }
    }
  }
}
