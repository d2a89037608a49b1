/** Pure HTML renderers. Display order is exactly the response order and
 * every number shown is a response field; nothing is recomputed here. */

import { rankDelta } from "./state.js";
import type { ResultEntry, Stage1Entry, TurnResponse, VideoMeta } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function formatScore(value: number): string {
  return value.toFixed(4);
}

function deltaBadge(entry: ResultEntry): string {
  const delta = rankDelta(entry);
  if (delta > 0) return `<span class="delta up">&#9650;${delta}</span>`;
  if (delta < 0) return `<span class="delta down">&#9660;${-delta}</span>`;
  return `<span class="delta flat">&#183;</span>`;
}

function finalRow(entry: ResultEntry): string {
  const stage2 =
    entry.stage2_score === undefined
      ? ""
      : `<td class="score">${formatScore(entry.stage2_score)}</td>`;
  return (
    `<tr data-video="${escapeHtml(entry.video_id)}">` +
    `<td class="rank">${entry.final_rank}</td>` +
    `<td class="video"><button class="inspect" data-video="${escapeHtml(entry.video_id)}">` +
    `${escapeHtml(entry.video_id)}</button></td>` +
    `<td class="score">${formatScore(entry.stage1_score)}</td>` +
    stage2 +
    `<td class="move">${deltaBadge(entry)}</td>` +
    `</tr>`
  );
}

function stage1Row(entry: Stage1Entry): string {
  return (
    `<tr data-video="${escapeHtml(entry.video_id)}">` +
    `<td class="rank">${entry.rank}</td>` +
    `<td class="video">${escapeHtml(entry.video_id)}</td>` +
    `<td class="score">${formatScore(entry.stage1_score)}</td>` +
    `</tr>`
  );
}

export function renderFinalColumn(turn: TurnResponse): string {
  const hasStage2 = turn.results.some((r) => r.stage2_score !== undefined);
  const header =
    `<tr><th>#</th><th>video</th><th>coarse</th>` +
    (hasStage2 ? `<th>re-rank</th>` : ``) +
    `<th>&Delta;</th></tr>`;
  return (
    `<table class="results final">` +
    `<caption>${hasStage2 ? "re-ranked order" : "coarse order"}</caption>` +
    `<thead>${header}</thead>` +
    `<tbody>${turn.results.map(finalRow).join("")}</tbody>` +
    `</table>`
  );
}

export function renderStage1Column(entries: Stage1Entry[]): string {
  return (
    `<table class="results stage1">` +
    `<caption>coarse order</caption>` +
    `<thead><tr><th>#</th><th>video</th><th>coarse</th></tr></thead>` +
    `<tbody>${entries.map(stage1Row).join("")}</tbody>` +
    `</table>`
  );
}

/** Turn 1 renders one column; later turns render coarse vs final side by
 * side (identical columns when stage II is off). */
export function renderTurn(turn: TurnResponse): string {
  const meta =
    `<div class="turn-meta">turn ${turn.turn} &mdash; ` +
    `<span class="query">${escapeHtml(turn.query)}</span>` +
    `${turn.clamped ? ` <span class="clamped">(m clamped)</span>` : ""}</div>`;
  if (!turn.stage1_results) {
    return `<section class="turn single">${meta}${renderFinalColumn(turn)}</section>`;
  }
  return (
    `<section class="turn comparison">${meta}` +
    `<div class="columns">` +
    renderStage1Column(turn.stage1_results) +
    renderFinalColumn(turn) +
    `</div></section>`
  );
}

export function renderVideoCard(meta: VideoMeta): string {
  const excerpt =
    meta.d_v.length > 160 ? `${meta.d_v.slice(0, 157)}...` : meta.d_v;
  return (
    `<aside class="video-card" data-video="${escapeHtml(meta.video_id)}">` +
    `<h3>${escapeHtml(meta.video_id)}</h3>` +
    `<dl>` +
    `<dt>source</dt><dd>${escapeHtml(meta.source_id)}</dd>` +
    `<dt>frames</dt><dd>${meta.n_frames}&times;${meta.dim}</dd>` +
    `<dt>description</dt><dd>${escapeHtml(excerpt) || "&mdash;"}</dd>` +
    `</dl>` +
    `<button class="dismiss">close</button>` +
    `</aside>`
  );
}

export function renderErrorBanner(message: string, staleSession: boolean): string {
  const hint = staleSession
    ? ` <button class="restart">start a new session</button>`
    : "";
  return (
    `<div class="banner error" role="alert">` +
    `<span>${escapeHtml(message)}</span>${hint}` +
    `<button class="dismiss">&times;</button>` +
    `</div>`
  );
}
