/**
 * main.ts - bootstrap and event wiring.
 *
 * One delegated listener per event type on the root element; every
 * interaction maps to exactly one store action, and the store re-renders
 * through its subscription. `createApp` is the composition point the
 * tests use with a mock transport; the browser entry at the bottom wires
 * the real fetch.
 */

import { ApiClient, FetchLike, RankMode } from "./api.js";
import { render } from "./render.js";
import { PAGE_SIZE, Store } from "./store.js";

export interface App {
  store: Store;
  root: HTMLElement;
}

export function createApp(root: HTMLElement, fetchFn: FetchLike): App {
  const store = new Store(new ApiClient(fetchFn));
  store.subscribe(() => render(root, store.state));

  root.addEventListener("change", (event) => {
    const target = event.target as HTMLInputElement;
    if (target.name === "rank") {
      void store.setRank(target.value as RankMode);
    }
  });

  root.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    const action = target.dataset.action;
    if (!action) return;
    event.preventDefault();
    const row = target.closest("tr") as HTMLTableRowElement | null;
    switch (action) {
      case "select":
        if (row?.dataset.property) void store.select(row.dataset.property);
        break;
      case "suppress":
        if (row?.dataset.property && row.dataset.signature) {
          void store.suppress(row.dataset.signature, row.dataset.property);
        }
        break;
      case "adjust": {
        const sig = row?.dataset.signature;
        const input = row?.querySelector<HTMLInputElement>('input[data-field="threshold"]');
        if (sig && input) void store.adjustThreshold(sig, Number(input.value));
        break;
      }
      case "whitelist": {
        const sig = row?.dataset.signature;
        const feature = row?.querySelector<HTMLInputElement>('input[data-field="feature"]');
        const value = row?.querySelector<HTMLInputElement>('input[data-field="value"]');
        if (sig && feature?.value && value?.value) {
          void store.whitelist(sig, feature.value, value.value);
        }
        break;
      }
      case "prev":
        void store.setPage(store.state.offset - PAGE_SIZE);
        break;
      case "next":
        void store.setPage(store.state.offset + PAGE_SIZE);
        break;
    }
  });

  return { store, root };
}

declare global {
  interface Window {
    __confsigTest?: boolean;
  }
}

if (typeof window !== "undefined" && !window.__confsigTest) {
  const root = document.getElementById("app");
  if (root) {
    const app = createApp(root, (input, init) => window.fetch(input, init));
    void app.store.refresh();
  }
}
