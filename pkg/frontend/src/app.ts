/** DOM wiring for the search console. One session per tab; every render
 * follows a confirmed response (no optimistic updates). */

import { ApiClient, ApiError } from "./api.js";
import { SessionView, withToggle } from "./state.js";
import { renderErrorBanner, renderTurn, renderVideoCard } from "./view.js";
import type { Overrides } from "./types.js";

const DEFAULT_BASE_URL = "http://127.0.0.1:8080";

export class Console {
  private session: SessionView | null = null;
  private overrides: Overrides = {};

  constructor(
    private readonly api: ApiClient,
    private readonly root: HTMLElement,
  ) {}

  private el<T extends HTMLElement>(selector: string): T {
    const found = this.root.querySelector<T>(selector);
    if (!found) throw new Error(`missing element ${selector}`);
    return found;
  }

  async start(): Promise<void> {
    const info = await this.api.getConfig();
    this.el<HTMLElement>("#service-info").textContent =
      `index: ${info.index_size} videos, k=${info.k}, m=${info.m}`;
    await this.newSession();
    this.el<HTMLFormElement>("#query-form").addEventListener("submit", (event) => {
      event.preventDefault();
      const input = this.el<HTMLInputElement>("#query-input");
      const query = input.value.trim();
      if (query) {
        void this.submitTurn(query);
        input.value = "";
      }
    });
    this.el<HTMLInputElement>("#toggle-stage2").addEventListener("change", (event) => {
      const on = (event.target as HTMLInputElement).checked;
      void this.applyToggle({ stage2: on });
    });
    this.el<HTMLSelectElement>("#toggle-fusion").addEventListener("change", (event) => {
      void this.applyToggle({ fusion_mode: (event.target as HTMLSelectElement).value });
    });
    this.el<HTMLInputElement>("#toggle-m").addEventListener("change", (event) => {
      void this.applyToggle({ m: Number((event.target as HTMLInputElement).value) });
    });
    this.el<HTMLInputElement>("#toggle-k").addEventListener("change", (event) => {
      void this.applyToggle({ k: Number((event.target as HTMLInputElement).value) });
    });
    this.root.addEventListener("click", (event) => {
      const target = event.target as HTMLElement;
      if (target.matches("button.inspect")) {
        void this.inspect(target.dataset.video ?? "");
      } else if (target.matches(".banner .dismiss, .video-card .dismiss")) {
        target.closest(".banner, .video-card")?.remove();
      } else if (target.matches(".banner .restart")) {
        target.closest(".banner")?.remove();
        void this.newSession();
      }
    });
  }

  async newSession(): Promise<void> {
    const { session_id } = await this.api.createSession();
    this.session = new SessionView(session_id);
    this.el<HTMLElement>("#turns").innerHTML = "";
    this.el<HTMLElement>("#session-id").textContent = session_id;
  }

  async submitTurn(query: string, overrides?: Overrides): Promise<void> {
    if (!this.session) return;
    try {
      const turn = await this.api.postTurn(
        this.session.sessionId,
        query,
        overrides ?? this.overrides,
      );
      this.session.applyTurn(turn);
      this.el<HTMLElement>("#turns").insertAdjacentHTML("afterbegin", renderTurn(turn));
    } catch (error) {
      this.showError(error);
    }
  }

  /** What-if exploration: re-issue the last query with changed settings. */
  async applyToggle(toggle: Overrides): Promise<void> {
    this.overrides = withToggle(this.overrides, toggle);
    const last = this.session?.lastQuery;
    if (last) await this.submitTurn(last, this.overrides);
  }

  async inspect(videoId: string): Promise<void> {
    if (!videoId) return;
    try {
      const meta = await this.api.getVideo(videoId);
      this.root.querySelector(".video-card")?.remove();
      this.el<HTMLElement>("#inspector").innerHTML = renderVideoCard(meta);
    } catch (error) {
      this.showError(error);
    }
  }

  private showError(error: unknown): void {
    const stale = error instanceof ApiError && error.staleSession;
    const message = error instanceof Error ? error.message : String(error);
    this.el<HTMLElement>("#banners").insertAdjacentHTML(
      "afterbegin",
      renderErrorBanner(message, stale),
    );
  }
}

export function boot(): void {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("api") ?? DEFAULT_BASE_URL;
  const api = new ApiClient(base);
  const root = document.getElementById("console");
  if (!root) throw new Error("missing #console root");
  const app = new Console(api, root);
  void app.start().catch((error) => {
    root.insertAdjacentHTML(
      "afterbegin",
      renderErrorBanner(error instanceof Error ? error.message : String(error), false),
    );
  });
}

if (typeof document !== "undefined" && document.getElementById("console")) {
  boot();
}
