// Review queue: tasks ascending by confidence (the server's order), a
// low-confidence badge below the routing threshold, claim with conflict
// handling, a retry banner on network failure, and a shuffle toggle for
// randomized working order.

import type { Client, TaskView } from "./api.js";
import { ApiError } from "./api.js";
import { clear, h } from "./dom.js";
import { confidenceBadge } from "./rubric.js";

export class QueueView {
  private tasks: TaskView[] = [];
  private shuffled = false;

  constructor(
    private readonly root: HTMLElement,
    private readonly client: Client,
    private readonly reviewerId: string,
    private readonly onClaimed: (task: TaskView) => void,
    private readonly lowBadgeBelow = 0.2,
  ) {}

  async load(): Promise<void> {
    try {
      this.tasks = await this.client.queue();
    } catch {
      this.renderRetryBanner();
      return;
    }
    this.render();
  }

  private renderRetryBanner(): void {
    clear(this.root);
    this.root.append(
      h("div", { class: "retry-banner" },
        "Could not load the queue. ",
        h("button", { class: "retry-button", onclick: () => void this.load() },
          "Retry"),
      ),
    );
  }

  private displayOrder(): TaskView[] {
    if (!this.shuffled) return this.tasks;
    const order = [...this.tasks];
    for (let i = order.length - 1; i > 0; i--) {
      const j = Math.floor(Math.random() * (i + 1));
      [order[i], order[j]] = [order[j], order[i]];
    }
    return order;
  }

  private render(): void {
    clear(this.root);
    const toggle = h("label", { class: "shuffle-toggle" },
      h("input", {
        type: "checkbox",
        onchange: (event) => {
          this.shuffled = (event.target as HTMLInputElement).checked;
          this.render();
        },
      }),
      " shuffle order",
    );
    (toggle.querySelector("input") as HTMLInputElement).checked = this.shuffled;
    this.root.append(h("div", { class: "queue-controls" }, toggle));

    if (this.tasks.length === 0) {
      this.root.append(
        h("p", { class: "queue-empty" }, "No tasks waiting for review."),
      );
      return;
    }
    const list = h("ul", { class: "queue-list" });
    for (const task of this.displayOrder()) {
      list.append(this.row(task));
    }
    this.root.append(list);
  }

  private row(task: TaskView): HTMLElement {
    const badge = confidenceBadge(task.confidence);
    const children: (Node | string)[] = [
      h("span", { class: "queue-essay" }, `essay ${task.essay_id}`),
      h(
        "span",
        { class: `confidence-badge badge-${badge}` },
        ` ${task.confidence.toFixed(3)}`,
      ),
    ];
    if (task.confidence < this.lowBadgeBelow) {
      children.push(
        h("span", { class: "low-confidence-flag" }, " needs close review"),
      );
    }
    const notice = h("span", { class: "claim-notice" });
    const button = h(
      "button",
      {
        class: "claim-button",
        onclick: () => void this.claim(task, notice),
      },
      "Claim",
    );
    children.push(button, notice);
    return h("li", { class: "queue-row", "data-task": task.task_id },
      ...children);
  }

  private async claim(task: TaskView, notice: HTMLElement): Promise<void> {
    try {
      const claimed = await this.client.claim(task.task_id, this.reviewerId);
      this.onClaimed(claimed);
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        notice.textContent = "already claimed by someone else";
        notice.classList.add("claim-conflict");
      } else {
        notice.textContent = "network failure — retry";
      }
    }
  }
}
