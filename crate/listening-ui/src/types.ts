// Mirrors of the JSON files written by `earballs make-test` and read back by
// `earballs grade`. Field names are the wire names.

export const SCHEMA_VERSION = 1;
export const CHOICES = ["A", "B", "C"] as const;
export const N_QUERIES = 8;

export type Choice = (typeof CHOICES)[number];

export interface UiClip {
  file: string;
  label: string;
  kind: "reference" | "query";
}

export interface UiIntro {
  file: string;
  label: string;
  plays: number;
}

export interface UiManifest {
  schema_version: number;
  package_id: string;
  clips: UiClip[];
  intro: UiIntro;
  choices: Choice[];
  time_limit_seconds: number;
}

export interface ResponseRecord {
  package_id: string;
  /** Query index "0".."7" to chosen reference. */
  answers: Record<string, Choice>;
  /** Reference the participant thinks the intro sound was. */
  memorability: Choice;
  participant_id: string;
  started_at: string;
  submitted_at: string;
  expired: boolean;
}

/** Administrator-only; the page never sees one. */
export interface AnswerKey {
  package_id: string;
  answers: Record<string, Choice>;
  memorability: Choice;
  model_id: string;
  seed: number;
}
