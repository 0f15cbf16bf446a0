import { CHOICES, Choice, N_QUERIES, ResponseRecord, SCHEMA_VERSION, UiManifest } from "./types.js";

const MANIFEST_KEYS = ["schema_version", "package_id", "clips", "intro", "choices", "time_limit_seconds"];
const FORBIDDEN_KEYS = ["key", "answers", "memorability", "memorability_choice"];

export class ManifestError extends Error {}

function isChoice(v: unknown): v is Choice {
  return typeof v === "string" && (CHOICES as readonly string[]).includes(v);
}

/** Rejects anything but an 11-clip blinded manifest. */
export function validateManifest(raw: unknown): UiManifest {
  if (typeof raw !== "object" || raw === null) throw new ManifestError("manifest is not an object");
  const m = raw as Record<string, unknown>;
  for (const k of Object.keys(m)) {
    if (FORBIDDEN_KEYS.includes(k)) throw new ManifestError(`manifest carries key material (${k}); refusing to load`);
    if (!MANIFEST_KEYS.includes(k)) throw new ManifestError(`unknown manifest field ${k}`);
  }
  if (m.schema_version !== SCHEMA_VERSION) throw new ManifestError(`unsupported schema_version ${String(m.schema_version)}`);
  const clips = m.clips;
  if (!Array.isArray(clips) || clips.length !== CHOICES.length + N_QUERIES) {
    throw new ManifestError(`expected ${CHOICES.length + N_QUERIES} clips, got ${Array.isArray(clips) ? clips.length : "none"}`);
  }
  return m as unknown as UiManifest;
}

export interface Session {
  manifest: UiManifest;
  answers: Map<string, Choice>;
  memorability: Choice | null;
  introPlays: number;
  startedAt: Date;
}

export function startSession(manifest: UiManifest, now: Date): Session {
  return { manifest, answers: new Map(), memorability: null, introPlays: 0, startedAt: now };
}

/** Invalid ids or choices leave the session unchanged and return false. */
export function recordResponse(s: Session, queryId: string, choice: string): boolean {
  if (!/^[0-7]$/.test(queryId) || !isChoice(choice)) return false;
  s.answers.set(queryId, choice);
  return true;
}

export function recordMemorability(s: Session, choice: string): boolean {
  if (!isChoice(choice)) return false;
  s.memorability = choice;
  return true;
}

/** Answered questions out of nine. */
export function progress(s: Session): number {
  return s.answers.size + (s.memorability === null ? 0 : 1);
}

export function isComplete(s: Session): boolean {
  return progress(s) === N_QUERIES + 1;
}

export function exportResponse(s: Session, participantId: string, now: Date): ResponseRecord {
  if (!isComplete(s)) throw new Error(`answer all ${N_QUERIES + 1} questions before submitting`);
  if (participantId.trim() === "") throw new Error("participant id is empty");
  const answers: Record<string, Choice> = {};
  for (let q = 0; q < N_QUERIES; q++) answers[String(q)] = s.answers.get(String(q)) as Choice;
  const elapsed = (now.getTime() - s.startedAt.getTime()) / 1000;
  return {
    package_id: s.manifest.package_id,
    answers,
    memorability: s.memorability as Choice,
    participant_id: participantId.trim(),
    started_at: s.startedAt.toISOString(),
    submitted_at: now.toISOString(),
    expired: elapsed > s.manifest.time_limit_seconds,
  };
}
