// DOM layer. All session rules live in SessionController; this file
// only turns state into elements and user gestures into calls.

import { ListenApi, Report } from "./api.js";
import { SessionController } from "./session.js";

export function formatPercent(x: number): string {
  return (100 * x).toFixed(2) + "%";
}

/** Text lines of the final report, overall first, then per event. */
export function reportLines(report: Report): string[] {
  const lines = [
    `decision error rate ${formatPercent(report.der)} ` +
      `(${report.der_exact}, ${report.n_wrong} wrong of ${report.n_counted})`,
    `replays used: ${report.replays}`,
  ];
  for (const [event, block] of Object.entries(report.per_event).sort()) {
    lines.push(
      `  ${event}: ${formatPercent(block.der)} (${block.wrong}/${block.n})`,
    );
  }
  return lines;
}

export class ListenUi {
  private readonly progressEl: HTMLElement;
  private readonly cardEl: HTMLElement;
  private started = false;

  constructor(
    root: HTMLElement,
    private readonly api: ListenApi,
    private readonly ctl: SessionController,
  ) {
    root.innerHTML = "";
    const header = document.createElement("header");
    const title = document.createElement("h1");
    title.textContent = "Listening test";
    this.progressEl = document.createElement("span");
    this.progressEl.className = "progress";
    header.append(title, this.progressEl);
    this.cardEl = document.createElement("main");
    root.append(header, this.cardEl);

    document.addEventListener("keydown", (ev) => {
      if (!this.ctl.canAnswer()) return;
      if (ev.key === "s" || ev.key === "S") void this.answer("same");
      if (ev.key === "d" || ev.key === "D") void this.answer("different");
    });
    window.addEventListener("beforeunload", (ev) => {
      if (this.started && !this.ctl.isComplete()) {
        ev.preventDefault();
        // legacy hook; modern browsers show their own wording
        ev.returnValue = "";
      }
    });
  }

  async run(): Promise<void> {
    this.started = true;
    window.location.hash = this.ctl.sessionId;
    if (this.ctl.isComplete()) {
      this.renderReport(await this.ctl.finalize());
      return;
    }
    this.renderTrial();
  }

  private clip(label: string, tokenPath: string, side: "a" | "b"): HTMLElement {
    const wrap = document.createElement("div");
    wrap.className = "clip";
    const caption = document.createElement("span");
    caption.textContent = label;
    const audio = document.createElement("audio");
    audio.controls = true;
    audio.preload = "auto";
    audio.src = this.api.audioUrl(tokenPath);
    audio.addEventListener("play", () => {
      this.ctl.markPlayed(side);
      this.syncButtons();
    });
    wrap.append(caption, audio);
    return wrap;
  }

  private syncButtons(): void {
    const enabled = this.ctl.canAnswer();
    for (const btn of this.cardEl.querySelectorAll("button")) {
      btn.disabled = !enabled;
    }
  }

  private renderTrial(): void {
    const { view } = this.ctl.current();
    this.progressEl.textContent = this.ctl.progress;
    this.cardEl.innerHTML = "";

    if (view.event) {
      const ev = document.createElement("p");
      ev.textContent = `event: ${view.event}`;
      this.cardEl.append(ev);
    }
    const ask = document.createElement("p");
    ask.textContent = "Are these two clips the same person?";
    this.cardEl.append(
      ask,
      this.clip("clip A", view.audio_a, "a"),
      this.clip("clip B", view.audio_b, "b"),
    );

    const controls = document.createElement("div");
    controls.className = "controls";
    for (const [label, value] of [
      ["Same (S)", "same"],
      ["Different (D)", "different"],
    ] as const) {
      const btn = document.createElement("button");
      btn.textContent = label;
      btn.addEventListener("click", () => void this.answer(value));
      controls.append(btn);
    }
    const hint = document.createElement("p");
    hint.className = "hint";
    hint.textContent = "Listen to both clips to unlock the answers.";
    this.cardEl.append(controls, hint);
    this.syncButtons();
  }

  private async answer(choice: "same" | "different"): Promise<void> {
    if (!this.ctl.canAnswer()) return;
    this.syncButtons(); // lock immediately; no double submission
    await this.ctl.answer(choice);
    if (this.ctl.isComplete()) {
      this.renderReport(await this.ctl.finalize());
    } else {
      this.renderTrial();
    }
  }

  private renderReport(report: Report): void {
    this.progressEl.textContent = `${this.ctl.nTrials}/${this.ctl.nTrials}`;
    this.cardEl.innerHTML = "";
    const h = document.createElement("h2");
    h.textContent = "Session complete";
    const pre = document.createElement("pre");
    pre.textContent = reportLines(report).join("\n");
    this.cardEl.append(h, pre);
  }
}
