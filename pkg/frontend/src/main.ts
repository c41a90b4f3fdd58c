// Entry point. Query parameters:
//   api=http://127.0.0.1:8321   service address (default: same origin)
//   protocol=trivial|disguise   session type for new sessions
//   seed=<int>                  session seed for new sessions
// A session id in the URL hash resumes that session from server state.

import { ListenApi } from "./api.js";
import { SessionController } from "./session.js";
import { ListenUi } from "./ui.js";

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const api = new ListenApi(params.get("api") ?? "");
  const ctl = new SessionController(api);

  const existing = window.location.hash.replace(/^#/, "");
  if (existing) {
    await ctl.resume(existing);
  } else {
    const protocol =
      params.get("protocol") === "disguise" ? "disguise" : "trivial";
    const seed = Number(params.get("seed") ?? Date.now() % 100000);
    await ctl.start({ protocol, seed });
  }

  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app element");
  await new ListenUi(root, api, ctl).run();
}

void boot().catch((err) => {
  const root = document.getElementById("app");
  if (root) {
    root.textContent = `failed to start session: ${String(err)}`;
  }
  console.error(err);
});
