// Page entry point, built to assets/app.js. Everything is fetched relative to
// index.html, so the page works from a local directory with no network.

import {
  exportResponse,
  isComplete,
  progress,
  recordMemorability,
  recordResponse,
  Session,
  startSession,
  validateManifest,
} from "./session.js";
import { N_QUERIES, UiManifest } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(tag: K, text?: string): HTMLElementTagNameMap[K] {
  const e = document.createElement(tag);
  if (text !== undefined) e.textContent = text;
  return e;
}

function banner(root: HTMLElement, msg: string) {
  const b = el("p", msg);
  b.className = "error";
  root.replaceChildren(b);
}

async function checkFiles(m: UiManifest): Promise<string | null> {
  for (const f of [m.intro.file, ...m.clips.map((c) => c.file)]) {
    const r = await fetch(f, { method: "HEAD" }).catch(() => null);
    if (!r || !r.ok) return f;
  }
  return null;
}

function choiceRow(m: UiManifest, name: string, onPick: (c: string) => void): HTMLElement {
  const row = el("span");
  for (const c of m.choices) {
    const label = el("label", ` ${c} `);
    const input = el("input");
    input.type = "radio";
    input.name = name;
    input.value = c;
    input.addEventListener("change", () => onPick(c));
    label.prepend(input);
    row.append(label);
  }
  return row;
}

function renderTest(root: HTMLElement, s: Session) {
  const m = s.manifest;
  const status = el("p");
  const submit = el("button", "Submit");
  const who = el("input");
  who.placeholder = "participant id";
  const refresh = () => {
    status.textContent = `${progress(s)} of ${N_QUERIES + 1} answered`;
    submit.disabled = !isComplete(s);
  };

  const refs = el("section");
  refs.append(el("h2", "References"));
  for (const c of m.clips.filter((c) => c.kind === "reference")) {
    const a = el("audio");
    a.controls = true;
    a.src = c.file;
    refs.append(el("div", c.label), a);
  }
  const queries = el("section");
  queries.append(el("h2", "Which reference does each clip sound most like?"));
  for (const c of m.clips.filter((c) => c.kind === "query")) {
    const a = el("audio");
    a.controls = true;
    a.src = c.file;
    const row = el("div", `Clip ${c.label} `);
    row.append(a, choiceRow(m, `q${c.label}`, (v) => (recordResponse(s, c.label, v), refresh())));
    queries.append(row);
  }
  const mem = el("section");
  mem.append(el("h2", `Which reference was the ${m.intro.label}?`));
  mem.append(choiceRow(m, "memorability", (v) => (recordMemorability(s, v), refresh())));

  const timer = el("p");
  const deadline = s.startedAt.getTime() + m.time_limit_seconds * 1000;
  setInterval(() => {
    const left = Math.max(0, Math.round((deadline - Date.now()) / 1000));
    timer.textContent = left > 0 ? `${Math.floor(left / 60)}:${String(left % 60).padStart(2, "0")} left` : "time is up";
  }, 1000);

  submit.addEventListener("click", () => {
    try {
      const r = exportResponse(s, who.value, new Date());
      const blob = new Blob([JSON.stringify(r, null, 2) + "\n"], { type: "application/json" });
      const a = el("a");
      a.href = URL.createObjectURL(blob);
      a.download = `response-${r.package_id}-${r.participant_id}.json`;
      a.click();
    } catch (e) {
      status.textContent = (e as Error).message;
    }
  });
  root.replaceChildren(timer, refs, queries, mem, who, submit, status);
  refresh();
}

function renderIntro(root: HTMLElement, m: UiManifest) {
  const s = startSession(m, new Date());
  const audio = el("audio");
  audio.src = m.intro.file;
  const play = el("button", `Play the ${m.intro.label}`);
  const next = el("button", "Continue to the test");
  next.disabled = true;
  play.addEventListener("click", () => {
    if (s.introPlays >= m.intro.plays) return;
    s.introPlays += 1;
    audio.currentTime = 0;
    void audio.play();
    play.textContent = `Play the ${m.intro.label} (${m.intro.plays - s.introPlays} left)`;
    play.disabled = s.introPlays >= m.intro.plays;
    next.disabled = !play.disabled;
  });
  next.addEventListener("click", () => {
    s.startedAt = new Date();
    renderTest(root, s);
  });
  root.replaceChildren(el("p", "Listen to this sound carefully. You will be asked about it later."), play, next);
}

async function main() {
  const root = document.getElementById("app");
  if (!root) return;
  try {
    const raw = await (await fetch(root.dataset.manifest ?? "manifest.json")).json();
    const m = validateManifest(raw);
    const missing = await checkFiles(m);
    if (missing) return banner(root, `missing clip: ${missing}`);
    renderIntro(root, m);
  } catch (e) {
    banner(root, (e as Error).message);
  }
}

void main();
