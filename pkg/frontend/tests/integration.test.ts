// End-to-end check against the real listening-test service: a scripted
// session answers every trial with a known key read from the server's
// own durable log (ground truth never crosses the HTTP API), then the
// finalized report is compared with hand-computed error rates exactly.

import { ChildProcess, execFileSync, spawn } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiError, ListenApi } from "../src/api.js";
import { SessionController } from "../src/session.js";

const HOST = "127.0.0.1";
const LONG = 180_000;

interface ServerHandle {
  base: string;
  logPath: string;
  proc: ChildProcess;
  stderr: string[];
}

interface KeyEntry {
  isTarget: boolean;
  event: string | null;
  counted: boolean;
}

let tmpRoot = "";
const servers: ServerHandle[] = [];

function synthCorpus(name: string, events?: string): string {
  const dir = path.join(tmpRoot, name);
  const args = [
    "-m", "tevkit.cli", "--seed", "5",
    "synth-corpus", "--out", dir, "--speakers", "3", "--utts", "2",
  ];
  if (events) args.push("--events", events);
  execFileSync("python3", args, { stdio: "pipe" });
  return path.join(dir, "manifest.tsv");
}

async function startServer(manifest: string, port: number): Promise<ServerHandle> {
  const logPath = path.join(tmpRoot, `log-${port}.jsonl`);
  const proc = spawn(
    "python3",
    [
      "-m", "tevkit.cli", "serve-listen",
      "--manifest", manifest, "--log", logPath,
      "--host", HOST, "--port", String(port),
    ],
    { stdio: ["ignore", "ignore", "pipe"] },
  );
  const handle: ServerHandle = {
    base: `http://${HOST}:${port}`,
    logPath,
    proc,
    stderr: [],
  };
  proc.stderr!.on("data", (chunk: Buffer) => {
    handle.stderr.push(chunk.toString());
  });
  const deadline = Date.now() + 60_000;
  for (;;) {
    if (proc.exitCode !== null) {
      throw new Error(`server exited early:\n${handle.stderr.join("")}`);
    }
    try {
      await fetch(`${handle.base}/sessions/none/trials/0`);
      return handle; // any HTTP response means the port is live
    } catch {
      if (Date.now() > deadline) {
        throw new Error(`server never came up:\n${handle.stderr.join("")}`);
      }
      await new Promise((r) => setTimeout(r, 150));
    }
  }
}

/** Ground truth for one session, read from the service's durable log. */
function readKey(logPath: string, sessionId: string): KeyEntry[] {
  const lines = fs.readFileSync(logPath, "utf-8").trim().split("\n");
  for (const line of lines) {
    const rec = JSON.parse(line) as {
      type: string;
      session_id?: string;
      trials?: { is_target: boolean; event: string | null; counted: boolean }[];
    };
    if (rec.type === "create" && rec.session_id === sessionId) {
      return rec.trials!.map((t) => ({
        isTarget: t.is_target,
        event: t.event,
        counted: t.counted,
      }));
    }
  }
  throw new Error(`no create record for ${sessionId}`);
}

function recordingFetch(payloads: string[]): typeof fetch {
  return async (input, init) => {
    const res = await fetch(input as RequestInfo, init);
    const ct = res.headers.get("content-type") ?? "";
    if (ct.includes("json")) {
      payloads.push(await res.clone().text());
    }
    return res;
  };
}

beforeAll(async () => {
  tmpRoot = fs.mkdtempSync(path.join(os.tmpdir(), "listen-ui-"));
  const trivialManifest = synthCorpus("corpus-trivial");
  const disguiseManifest = synthCorpus("corpus-disguise", "normal,disguised");
  servers.push(await startServer(trivialManifest, 8473));
  servers.push(await startServer(disguiseManifest, 8474));
}, LONG);

afterAll(async () => {
  for (const s of servers) {
    s.proc.kill("SIGTERM");
  }
  await new Promise((r) => setTimeout(r, 300));
  for (const s of servers) {
    if (s.proc.exitCode === null) s.proc.kill("SIGKILL");
  }
  if (tmpRoot) fs.rmSync(tmpRoot, { recursive: true, force: true });
});

describe("scripted session against the live service", () => {
  it(
    "matches hand-computed error rates exactly and leaks no identities",
    async () => {
      const srv = servers[0];
      const payloads: string[] = [];
      const api = new ListenApi(srv.base, recordingFetch(payloads));

      let ctl = new SessionController(api);
      await ctl.start({ protocol: "trivial", per_event: 6, seed: 7 });
      const sid = ctl.sessionId;
      expect(ctl.nTrials).toBe(36);

      const key = readKey(srv.logPath, sid);
      expect(key).toHaveLength(36);
      expect(key.every((t) => t.counted)).toBe(true);

      // deliberate mistakes on a fixed subset of trials
      const flipped = (k: number) => k % 5 === 0;

      for (let k = 0; k < 36; k++) {
        if (k === 10) {
          // mid-session refresh: a fresh controller resumes from the server
          ctl = new SessionController(api);
          await ctl.resume(sid);
          expect(ctl.progress).toBe("11/36");
        }
        const view = ctl.current().view;
        expect(view.index).toBe(k);

        // listen to both clips exactly once
        for (const tok of [view.audio_a, view.audio_b]) {
          const res = await fetch(api.audioUrl(tok));
          expect(res.status).toBe(200);
          expect(res.headers.get("content-type")).toBe("audio/wav");
          const head = new Uint8Array(await res.arrayBuffer()).slice(0, 4);
          expect(String.fromCharCode(...head)).toBe("RIFF");
        }
        ctl.markPlayed("a");
        ctl.markPlayed("b");

        const correct = key[k].isTarget ? "same" : "different";
        const wrongAnswer = key[k].isTarget ? "different" : "same";
        await ctl.answer(flipped(k) ? wrongAnswer : correct);
      }
      expect(ctl.isComplete()).toBe(true);

      // answered trials stay visible and locked
      const again = await api.trial(sid, 0);
      expect(again.answered).toBe(true);

      // a second judgment for an answered trial is rejected
      const dup = await api.submitAnswer(sid, 0, "same").catch((e: unknown) => e);
      expect(dup).toBeInstanceOf(ApiError);
      expect((dup as ApiError).status).toBe(409);
      expect((dup as ApiError).detail).toMatch(/already answered/);

      // nothing served so far names a speaker or reveals ground truth
      expect(payloads.length).toBeGreaterThan(36);
      for (const text of payloads) {
        expect(text).not.toMatch(/is_target/);
        expect(text).not.toMatch(/spk/);
        expect(text).not.toMatch(/utt_/);
        expect(text).not.toMatch(/s\d{3}/);
        const obj = JSON.parse(text) as Record<string, unknown>;
        if ("audio_a" in obj) {
          expect(Object.keys(obj).sort()).toEqual([
            "answered", "audio_a", "audio_b", "event", "index", "n_trials",
          ]);
          expect(obj.audio_a).toMatch(/^\/audio\/[0-9a-f]{32}$/);
          expect(obj.audio_b).toMatch(/^\/audio\/[0-9a-f]{32}$/);
        }
      }

      const report = await ctl.finalize();

      // hand-computed: 8 flipped trials out of 36, every trial counted
      const nWrong = key.filter((_, k) => flipped(k)).length;
      expect(nWrong).toBe(8);
      expect(report.n_counted).toBe(36);
      expect(report.n_wrong).toBe(8);
      expect(report.der).toBe(8 / 36);
      expect(report.der_exact).toBe("8/36");
      expect(report.replays).toBe(72); // each clip fetched exactly once

      // per-event blocks, recomputed from the key
      const byEvent = new Map<string, { n: number; wrong: number }>();
      key.forEach((t, k) => {
        const ev = t.event!;
        const block = byEvent.get(ev) ?? { n: 0, wrong: 0 };
        block.n += 1;
        if (flipped(k)) block.wrong += 1;
        byEvent.set(ev, block);
      });
      expect(Object.keys(report.per_event).sort()).toEqual(
        [...byEvent.keys()].sort(),
      );
      for (const [ev, block] of byEvent) {
        expect(report.per_event[ev].n).toBe(block.n);
        expect(report.per_event[ev].wrong).toBe(block.wrong);
        expect(report.per_event[ev].der).toBe(block.wrong / block.n);
      }

      // the report endpoint returns the same finalized numbers
      const rep2 = await api.report(sid);
      expect(rep2.der).toBe(report.der);
      expect(rep2.der_exact).toBe(report.der_exact);

      console.log(
        `[criterion 13] PASS der ${report.der_exact} exact, per-event exact, ` +
          `duplicate rejected, ${payloads.length} payloads identity-free, ` +
          `replays ${report.replays}`,
      );
    },
    LONG,
  );

  it(
    "disguise sessions count only the scored trials",
    async () => {
      const srv = servers[1];
      const api = new ListenApi(srv.base);
      const ctl = new SessionController(api);
      await ctl.start({
        protocol: "disguise",
        per_event: 6,
        imposter_noise: 2,
        seed: 3,
      });
      expect(ctl.nTrials).toBe(8); // 6 counted + 2 uncounted imposters

      const key = readKey(srv.logPath, ctl.sessionId);
      expect(key.filter((t) => t.counted)).toHaveLength(6);

      // answer everything correctly except one counted and one uncounted
      const flipCounted = key.findIndex((t) => t.counted);
      const flipNoise = key.findIndex((t) => !t.counted);
      for (let k = 0; k < 8; k++) {
        ctl.markPlayed("a");
        ctl.markPlayed("b");
        const correct = key[k].isTarget ? "same" : "different";
        const wrongAnswer = key[k].isTarget ? "different" : "same";
        const flip = k === flipCounted || k === flipNoise;
        await ctl.answer(flip ? wrongAnswer : correct);
      }

      const report = await ctl.finalize();
      expect(report.protocol).toBe("disguise");
      expect(report.n_counted).toBe(6);
      expect(report.n_wrong).toBe(1); // the uncounted mistake is invisible
      expect(report.der).toBe(1 / 6);
      expect(report.der_exact).toBe("1/6");
      expect(report.per_event).toEqual({});
    },
    LONG,
  );

  it("rejects the disguise protocol on a corpus without disguised speech", async () => {
    const api = new ListenApi(servers[0].base);
    const err = await api
      .createSession({ protocol: "disguise", per_event: 4 })
      .catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(409);
  }, LONG);
});
