// Typed client over the grading service HTTP API. The server is the source
// of truth: the AI panel arrives only in post-reveal payloads.

import type { Rubric, ScoreVector } from "./rubric.js";

export interface AiFeedback {
  fast_scores: ScoreVector;
  confidence: number;
  slow_scores: ScoreVector | null;
  explanation: string | null;
  rubric_id?: string;
}

export type Stage = "Blind" | "Revealed" | "Done";

export interface TaskView {
  task_id: string;
  essay_id: string;
  essay_text: string;
  created_at_ms: number;
  status: "Open" | "Claimed" | "Completed";
  stage: Stage;
  confidence: number;
  reviewer_id: string | null;
  rubric_id: string;
  initial_human_scores: ScoreVector | null;
  revised_human_scores: ScoreVector | null;
  initial_elapsed_s: number | null;
  revise_elapsed_s: number | null;
  ai_feedback?: AiFeedback; // absent until the Blind stage is over
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: unknown,
  ) {
    super(typeof detail === "string" ? detail : JSON.stringify(detail));
  }
}

export type FetchLike = (
  url: string,
  init?: {
    method?: string;
    headers?: Record<string, string>;
    body?: string;
  },
) => Promise<{ status: number; json(): Promise<unknown> }>;

export class Client {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike,
    private readonly token?: string,
  ) {}

  private async request(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<unknown> {
    const headers: Record<string, string> = {
      "Content-Type": "application/json",
    };
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    const response = await this.fetchFn(this.baseUrl + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload = await response.json();
    if (response.status >= 400) {
      throw new ApiError(
        response.status,
        (payload as { detail?: unknown }).detail ?? payload,
      );
    }
    return payload;
  }

  async rubric(): Promise<{ rubric_id: string; rubric: Rubric }> {
    return (await this.request("GET", "/rubric")) as {
      rubric_id: string;
      rubric: Rubric;
    };
  }

  async queue(maxConfidence?: number): Promise<TaskView[]> {
    const query =
      maxConfidence === undefined ? "" : `?max_confidence=${maxConfidence}`;
    return (await this.request("GET", `/queue${query}`)) as TaskView[];
  }

  async task(taskId: string): Promise<TaskView> {
    return (await this.request("GET", `/tasks/${taskId}`)) as TaskView;
  }

  async claim(taskId: string, reviewerId: string): Promise<TaskView> {
    return (await this.request("POST", `/tasks/${taskId}/claim`, {
      reviewer_id: reviewerId,
    })) as TaskView;
  }

  async release(taskId: string, reviewerId: string): Promise<TaskView> {
    return (await this.request("POST", `/tasks/${taskId}/release`, {
      reviewer_id: reviewerId,
    })) as TaskView;
  }

  /** Blind-stage submission; the response payload performs the reveal. */
  async submitInitial(
    taskId: string,
    reviewerId: string,
    scores: ScoreVector,
    elapsedSeconds: number,
  ): Promise<TaskView> {
    return (await this.request("POST", `/tasks/${taskId}/initial`, {
      reviewer_id: reviewerId,
      scores,
      elapsed_seconds: elapsedSeconds,
    })) as TaskView;
  }

  async submitReview(
    taskId: string,
    reviewerId: string,
    revised: ScoreVector,
    elapsedSeconds: number,
  ): Promise<TaskView> {
    return (await this.request("POST", `/tasks/${taskId}/review`, {
      reviewer_id: reviewerId,
      revised_scores: revised,
      elapsed_seconds: elapsedSeconds,
    })) as TaskView;
  }
}
