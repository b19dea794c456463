// Per-stage elapsed-time tracking. Stages never share time: stopping one
// stage and starting the next hands the clock over at a single instant.

export type Now = () => number; // milliseconds

export class StageTimer {
  private startedAt: number | null = null;
  private readonly totals = new Map<string, number>();
  private current: string | null = null;

  constructor(private readonly now: Now = () => Date.now()) {}

  start(stage: string): void {
    this.stop();
    this.current = stage;
    this.startedAt = this.now();
  }

  stop(): void {
    if (this.current !== null && this.startedAt !== null) {
      const elapsed = Math.max(0, this.now() - this.startedAt);
      this.totals.set(
        this.current,
        (this.totals.get(this.current) ?? 0) + elapsed,
      );
    }
    this.current = null;
    this.startedAt = null;
  }

  /** Seconds accumulated for the stage, including a still-running one. */
  elapsedSeconds(stage: string): number {
    let total = this.totals.get(stage) ?? 0;
    if (this.current === stage && this.startedAt !== null) {
      total += Math.max(0, this.now() - this.startedAt);
    }
    return total / 1000;
  }
}
