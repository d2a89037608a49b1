import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { renderErrorBanner, renderTurn, renderVideoCard } from "../src/view.js";
import type { TurnResponse, VideoMeta } from "../src/types.js";

const here = dirname(fileURLToPath(import.meta.url));
const fixture = JSON.parse(
  readFileSync(join(here, "fixtures", "transcript.json"), "utf-8"),
) as { turns: TurnResponse[]; videos: Record<string, VideoMeta> };

function videoOrder(html: string, tableClass: string): string[] {
  const table = html.match(
    new RegExp(`<table class="results ${tableClass}">.*?</table>`, "s"),
  );
  if (!table) return [];
  return [...table[0].matchAll(/<tr data-video="([^"]+)"/g)].map((m) => m[1]);
}

describe("golden transcript replay", () => {
  it("renders every turn byte-identically to the stored snapshot", () => {
    for (const turn of fixture.turns) {
      expect(renderTurn(turn)).toMatchSnapshot(`turn-${turn.turn}`);
    }
  });

  it("turn 1 renders a single column without re-rank scores", () => {
    const html = renderTurn(fixture.turns[0]);
    expect(html).toContain('class="turn single"');
    expect(html).not.toContain("re-rank");
    expect(videoOrder(html, "final")).toEqual(
      fixture.turns[0].results.map((r) => r.video_id),
    );
  });

  it("turn 2 renders both orders exactly as the response lists them", () => {
    const turn = fixture.turns[1];
    const html = renderTurn(turn);
    expect(html).toContain('class="turn comparison"');
    expect(videoOrder(html, "stage1")).toEqual(
      turn.stage1_results!.map((r) => r.video_id),
    );
    expect(videoOrder(html, "final")).toEqual(turn.results.map((r) => r.video_id));
  });

  it("rank-delta badges follow the response rank fields", () => {
    const turn = fixture.turns[1];
    const html = renderTurn(turn);
    for (const entry of turn.results) {
      const delta = entry.stage1_rank - entry.final_rank;
      if (delta > 0) expect(html).toContain(`&#9650;${delta}`);
      if (delta < 0) expect(html).toContain(`&#9660;${-delta}`);
    }
  });

  it("stage2-off turn renders identical columns", () => {
    const turn = fixture.turns[2];
    expect(turn.config.stage2).toBe(false);
    const html = renderTurn(turn);
    expect(videoOrder(html, "stage1")).toEqual(videoOrder(html, "final"));
    const scores = (cls: string) =>
      html
        .match(new RegExp(`<table class="results ${cls}">.*?</table>`, "s"))![0]
        .match(/<td class="score">([\d.-]+)<\/td>/g);
    expect(scores("stage1")).toEqual(scores("final"));
  });

  it("every displayed score is a response field", () => {
    const turn = fixture.turns[1];
    const html = renderTurn(turn);
    const shown = [...html.matchAll(/<td class="score">([\d.-]+)<\/td>/g)].map(
      (m) => Number(m[1]),
    );
    const fromResponse = new Set(
      [
        ...turn.results.flatMap((r) =>
          r.stage2_score === undefined
            ? [r.stage1_score]
            : [r.stage1_score, r.stage2_score],
        ),
        ...turn.stage1_results!.map((r) => r.stage1_score),
      ].map((v) => Number(v.toFixed(4))),
    );
    for (const value of shown) {
      expect(fromResponse.has(value)).toBe(true);
    }
  });
});

describe("video card", () => {
  it("renders metadata and the description excerpt", () => {
    const meta = Object.values(fixture.videos)[0];
    const html = renderVideoCard(meta);
    expect(html).toMatchSnapshot("video-card");
    expect(html).toContain(meta.source_id);
  });

  it("escapes markup in descriptions", () => {
    const html = renderVideoCard({
      video_id: "v", source_id: "s", n_frames: 4, dim: 8,
      d_v: '<script>alert("x")</script>',
    });
    expect(html).not.toContain("<script>");
    expect(html).toContain("&lt;script&gt;");
  });
});

describe("error banner", () => {
  it("offers a restart only for stale sessions", () => {
    expect(renderErrorBanner("HTTP 410: session expired", true)).toContain("restart");
    expect(renderErrorBanner("HTTP 400: empty query", false)).not.toContain("restart");
  });
});
