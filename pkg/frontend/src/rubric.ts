// Rubric types and score validation mirroring the server's rules exactly:
// the client must reject precisely the vectors the server rejects.

export interface RubricDimension {
  name: string;
  min: number;
  max: number;
}

export interface Rubric {
  dimensions: RubricDimension[];
  overall_range: [number, number];
  sum_constraint: boolean;
  guideline_text: string;
}

export interface ScoreVector {
  overall: number;
  per_dimension: Record<string, number>;
}

function isInteger(value: number): boolean {
  return Number.isFinite(value) && Math.floor(value) === value;
}

/** Inline message for one dimension field, e.g. "max 8"; null when fine. */
export function fieldError(dim: RubricDimension, value: number): string | null {
  if (!isInteger(value)) return "integer required";
  if (value < dim.min) return `min ${dim.min}`;
  if (value > dim.max) return `max ${dim.max}`;
  return null;
}

/** Inline message for the overall field. */
export function overallError(rubric: Rubric, value: number): string | null {
  const [lo, hi] = rubric.overall_range;
  if (!isInteger(value)) return "integer required";
  if (value < lo) return `min ${lo}`;
  if (value > hi) return `max ${hi}`;
  return null;
}

export function overallFromDimensions(
  rubric: Rubric,
  perDimension: Record<string, number>,
): number {
  return rubric.dimensions.reduce(
    (sum, dim) => sum + (perDimension[dim.name] ?? 0),
    0,
  );
}

/** Full-vector validation; empty list means the server will accept it. */
export function validateScores(rubric: Rubric, scores: ScoreVector): string[] {
  const problems: string[] = [];
  const overall = overallError(rubric, scores.overall);
  if (overall) problems.push(`overall: ${overall}`);
  for (const dim of rubric.dimensions) {
    const value = scores.per_dimension[dim.name];
    if (value === undefined) {
      problems.push(`${dim.name}: missing`);
      continue;
    }
    const error = fieldError(dim, value);
    if (error) problems.push(`${dim.name}: ${error}`);
  }
  const known = new Set(rubric.dimensions.map((d) => d.name));
  for (const name of Object.keys(scores.per_dimension)) {
    if (!known.has(name)) problems.push(`${name}: unknown dimension`);
  }
  if (rubric.sum_constraint && problems.length === 0) {
    const total = overallFromDimensions(rubric, scores.per_dimension);
    if (total !== scores.overall) {
      problems.push(
        `overall must equal ${rubric.dimensions.map((d) => d.name).join("+")}`,
      );
    }
  }
  return problems;
}

export type BadgeLevel = "low" | "medium" | "high";

/** Three-level confidence badge: low < 0.2 <= medium < 0.6 <= high. */
export function confidenceBadge(
  confidence: number,
  lowBelow = 0.2,
  mediumBelow = 0.6,
): BadgeLevel {
  if (confidence < lowBelow) return "low";
  if (confidence < mediumBelow) return "medium";
  return "high";
}
