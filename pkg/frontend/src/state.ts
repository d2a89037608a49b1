/** Session bookkeeping for one browser tab. */

import type { Overrides, ResultEntry, TurnResponse } from "./types.js";

export class SessionView {
  readonly turns: TurnResponse[] = [];

  constructor(readonly sessionId: string) {}

  applyTurn(turn: TurnResponse): void {
    this.turns.push(turn);
  }

  get lastTurn(): TurnResponse | undefined {
    return this.turns[this.turns.length - 1];
  }

  /** Query text to replay when a toggle re-issues the last turn. */
  get lastQuery(): string | undefined {
    return this.lastTurn?.query;
  }
}

/** Positive = moved up under re-ranking; both ranks come from the response. */
export function rankDelta(entry: ResultEntry): number {
  return entry.stage1_rank - entry.final_rank;
}

/** Merge the current settings with one toggled override. */
export function withToggle(current: Overrides, toggle: Overrides): Overrides {
  return { ...current, ...toggle };
}
