// Wires the state machine, API client, and renderers together.

import { ApiClient, ApiError } from "./api.js";
import { QuerySession, type PlateView } from "./state.js";
import { renderValidation, renderView } from "./view.js";

const K_DEFAULT = 10;
const K_MIN = 1;
const K_MAX = 100;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

export function boot(): void {
  const api = new ApiClient("");
  const session = new QuerySession();
  const input = el<HTMLInputElement>("plate-input");
  const kInput = el<HTMLInputElement>("k-input");
  const submit = el<HTMLButtonElement>("submit");
  const backButton = el<HTMLButtonElement>("back");
  const hint = el<HTMLElement>("validation");
  const status = el<HTMLElement>("status");
  const results = el<HTMLElement>("results");

  function sync(): void {
    const state = session.state;
    submit.disabled = !state.validation.valid || state.pending;
    backButton.disabled = !session.canGoBack();
    renderValidation(hint, state.validation);
    status.textContent = state.pending ? "querying…" : (state.lastError ?? "");
    if (state.current) {
      renderView(results, state.current);
      results.querySelectorAll<HTMLButtonElement>("button.pivot").forEach((button) => {
        button.addEventListener("click", () => {
          input.value = button.dataset.plate ?? "";
          runQuery(session.pivot(input.value));
        });
      });
    }
  }

  function clampK(): number {
    const k = Math.min(K_MAX, Math.max(K_MIN, Number(kInput.value) || K_DEFAULT));
    kInput.value = String(k);
    return k;
  }

  async function runQuery(seq: number | null): Promise<void> {
    if (seq === null) {
      sync();
      return;
    }
    sync();
    const plate = session.validation().canonical as string;
    try {
      const [estimate, distribution, similar, history] = await Promise.all([
        api.estimate(plate),
        api.distribution(plate),
        api.similar(plate, clampK()),
        api.history(plate),
      ]);
      const view: PlateView = { plate: estimate.plate, estimate, distribution, similar, history };
      session.complete(seq, view);
    } catch (err) {
      const message = err instanceof ApiError ? `${err.code}: ${err.message}` : String(err);
      session.fail(seq, message);
    }
    sync();
  }

  input.addEventListener("input", () => {
    session.setInput(input.value);
    sync();
  });
  submit.addEventListener("click", () => runQuery(session.startQuery()));
  input.addEventListener("keydown", (ev) => {
    if (ev.key === "Enter") runQuery(session.startQuery());
  });
  backButton.addEventListener("click", () => {
    if (session.back()) {
      input.value = session.state.inputText;
    }
    sync();
  });
  sync();
}

if (typeof document !== "undefined" && document.getElementById("plate-input")) {
  boot();
}
