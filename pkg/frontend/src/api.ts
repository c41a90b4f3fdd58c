// Typed client for the listening-test service. Audio is addressed by
// opaque token URLs; nothing in these payloads identifies a speaker or
// an utterance before finalize.

export type Answer = "same" | "different";

export interface SessionRequest {
  protocol?: "trivial" | "disguise";
  per_event?: number;
  p_target?: number;
  imposter_noise?: number;
  seed?: number;
}

export interface CreatedSession {
  session_id: string;
  n_trials: number;
  protocol: string;
}

export interface TrialView {
  index: number;
  n_trials: number;
  event: string | null;
  audio_a: string; // "/audio/<token>"
  audio_b: string;
  answered: boolean;
}

export interface AnswerAck {
  ok: boolean;
  index: number;
  // trials still unanswered; -1 when recovered from a duplicate after a
  // network failure (the first attempt landed, the count was lost)
  remaining: number;
}

export interface EventReport {
  n: number;
  wrong: number;
  der: number;
}

export interface Report {
  session_id: string;
  protocol: string;
  n_counted: number;
  n_wrong: number;
  der: number;
  der_exact: string;
  replays: number;
  per_event: Record<string, EventReport>;
}

export class ApiError extends Error {
  constructor(readonly status: number, readonly detail: string) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

export class ListenApi {
  constructor(
    readonly base: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(this.base + path, init);
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const body = (await res.json()) as { detail?: unknown };
        if (typeof body.detail === "string") detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(res.status, detail);
    }
    return (await res.json()) as T;
  }

  createSession(cfg: SessionRequest = {}): Promise<CreatedSession> {
    return this.request("/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(cfg),
    });
  }

  trial(sessionId: string, index: number): Promise<TrialView> {
    return this.request(`/sessions/${sessionId}/trials/${index}`);
  }

  /** Submit one judgment. Answer submission is idempotent on the
   * server, so transient network failures are retried; a duplicate
   * rejection right after a network failure means the first attempt
   * landed and is reported as success. */
  async submitAnswer(
    sessionId: string,
    index: number,
    answer: Answer,
    attempts = 3,
  ): Promise<AnswerAck> {
    let sawNetworkFailure = false;
    for (let attempt = 1; ; attempt++) {
      try {
        return await this.request<AnswerAck>(
          `/sessions/${sessionId}/trials/${index}/answer`,
          {
            method: "POST",
            headers: { "content-type": "application/json" },
            body: JSON.stringify({ answer }),
          },
        );
      } catch (err) {
        if (err instanceof ApiError) {
          if (err.status === 409 && sawNetworkFailure) {
            return { ok: true, index, remaining: -1 };
          }
          throw err;
        }
        sawNetworkFailure = true;
        if (attempt >= attempts) throw err;
        await sleep(50 * attempt);
      }
    }
  }

  finalize(sessionId: string): Promise<Report> {
    return this.request(`/sessions/${sessionId}/finalize`, { method: "POST" });
  }

  report(sessionId: string): Promise<Report> {
    return this.request(`/sessions/${sessionId}/report`);
  }

  /** Absolute URL for a trial's audio_a/audio_b token path. */
  audioUrl(tokenPath: string): string {
    return this.base + tokenPath;
  }
}
