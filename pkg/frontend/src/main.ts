// App bootstrap: the queue claims into the workspace; the server drives all
// state, including when the AI panel may exist at all.

import { Client } from "./api.js";
import { h } from "./dom.js";
import { QueueView } from "./queue.js";
import { Workspace } from "./workspace.js";

export async function boot(root: HTMLElement): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const baseUrl = params.get("api") ?? "";
  const reviewerId = params.get("reviewer") ?? "reviewer";
  const token = params.get("token") ?? undefined;
  const client = new Client(baseUrl, (url, init) => fetch(url, init), token);

  const { rubric } = await client.rubric();
  const queueRoot = h("section", { id: "queue" });
  const workRoot = h("section", { id: "workspace" });
  root.append(h("h1", {}, "Review queue"), queueRoot, workRoot);

  const workspace = new Workspace(
    workRoot,
    client,
    rubric,
    reviewerId,
    undefined,
    () => void queue.load(),
  );
  const queue = new QueueView(queueRoot, client, reviewerId, (task) =>
    workspace.open(task),
  );
  await queue.load();
}

declare global {
  interface Window {
    __duograderBooted?: Promise<void>;
  }
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  window.__duograderBooted = boot(
    document.getElementById("app") as HTMLElement,
  );
}
