// Session state machine, kept free of DOM so it is testable headless.
// Enforces the client-side rules: each clip heard at least once before
// the answer controls unlock, exactly one judgment per trial, finalize
// only when every trial is answered.

import { Answer, ListenApi, Report, TrialView } from "./api.js";

export type Chosen = Answer | "none";

export interface TrialState {
  view: TrialView;
  chosen: Chosen; // chosen !== "none" implies view.answered
  playedA: boolean;
  playedB: boolean;
}

export class SessionController {
  private trials: TrialState[] = [];
  private cursor = 0;
  private sessionId_ = "";
  private finalReport: Report | null = null;

  constructor(private readonly api: ListenApi) {}

  get sessionId(): string {
    return this.sessionId_;
  }

  get nTrials(): number {
    return this.trials.length;
  }

  /** "k/n" with k the 1-based position of the current trial. */
  get progress(): string {
    return `${Math.min(this.cursor + 1, this.nTrials)}/${this.nTrials}`;
  }

  async start(cfg: Parameters<ListenApi["createSession"]>[0] = {}): Promise<void> {
    const created = await this.api.createSession(cfg);
    await this.load(created.session_id, created.n_trials);
  }

  /** Resume an existing session from server state (page refresh). */
  async resume(sessionId: string): Promise<void> {
    const first = await this.api.trial(sessionId, 0);
    await this.load(sessionId, first.n_trials, first);
  }

  private async load(sessionId: string, n: number, first?: TrialView): Promise<void> {
    this.sessionId_ = sessionId;
    this.trials = [];
    for (let k = 0; k < n; k++) {
      const view = k === 0 && first ? first : await this.api.trial(sessionId, k);
      this.trials.push({
        view,
        chosen: "none",
        // answers recorded in an earlier visit stay locked; which button
        // was pressed is server-side only, so chosen remains "none"
        playedA: view.answered,
        playedB: view.answered,
      });
    }
    this.cursor = this.firstUnanswered();
  }

  private firstUnanswered(): number {
    const k = this.trials.findIndex((t) => !t.view.answered);
    return k === -1 ? this.trials.length : k;
  }

  current(): TrialState {
    if (this.cursor >= this.trials.length) {
      throw new Error("session complete");
    }
    return this.trials[this.cursor];
  }

  isComplete(): boolean {
    return this.trials.length > 0 && this.trials.every((t) => t.view.answered);
  }

  markPlayed(side: "a" | "b"): void {
    const t = this.current();
    if (side === "a") t.playedA = true;
    else t.playedB = true;
  }

  /** Answer controls stay locked until both clips were heard. */
  canAnswer(): boolean {
    if (this.cursor >= this.trials.length) return false;
    const t = this.trials[this.cursor];
    return !t.view.answered && t.playedA && t.playedB;
  }

  async answer(choice: Answer): Promise<void> {
    const t = this.current();
    if (t.view.answered) {
      throw new Error(`trial ${t.view.index} already answered`);
    }
    if (!this.canAnswer()) {
      throw new Error("listen to both clips before answering");
    }
    await this.api.submitAnswer(this.sessionId_, t.view.index, choice);
    t.view.answered = true;
    t.chosen = choice;
    this.cursor = this.firstUnanswered();
  }

  async finalize(): Promise<Report> {
    if (!this.finalReport) {
      if (!this.isComplete()) {
        throw new Error("unanswered trials remain");
      }
      this.finalReport = await this.api.finalize(this.sessionId_);
    }
    return this.finalReport;
  }
}
