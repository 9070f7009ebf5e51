import type { Stroke } from "./types";

export type EditAction =
  | { type: "draw"; stroke: Stroke }
  | { type: "erase"; index: number };

export type EditEvent = EditAction | { type: "undo" } | { type: "redo" };

/** Fold a list of actions into the resulting stroke list. */
export function replayActions(actions: EditAction[]): Stroke[] {
  const strokes: Stroke[] = [];
  for (const a of actions) {
    if (a.type === "draw") {
      strokes.push(a.stroke);
    } else if (a.index >= 0 && a.index < strokes.length) {
      strokes.splice(a.index, 1);
    }
  }
  return strokes;
}

/**
 * Canvas edit history. Drawing and erasing are undoable actions; undo pops
 * exactly one action and redo restores it. The current stroke list is always
 * identical to replaying the effective action log, which the tests verify on
 * random edit scripts.
 */
export class StrokeEditor {
  private past: EditAction[] = [];
  private future: EditAction[] = [];

  get strokes(): Stroke[] {
    return replayActions(this.past);
  }

  get actions(): readonly EditAction[] {
    return this.past;
  }

  get canUndo(): boolean {
    return this.past.length > 0;
  }

  get canRedo(): boolean {
    return this.future.length > 0;
  }

  apply(ev: EditEvent): void {
    switch (ev.type) {
      case "draw":
        if (ev.stroke.length < 2) return; // degenerate strokes are dropped
        this.past.push(ev);
        this.future = [];
        break;
      case "erase": {
        const n = this.strokes.length;
        if (ev.index < 0 || ev.index >= n) return; // erase on empty is a no-op
        this.past.push(ev);
        this.future = [];
        break;
      }
      case "undo": {
        const a = this.past.pop();
        if (a) this.future.unshift(a);
        break;
      }
      case "redo": {
        const a = this.future.shift();
        if (a) this.past.push(a);
        break;
      }
    }
  }

  clear(): void {
    this.past = [];
    this.future = [];
  }

  /** Index of the stroke nearest to a point, or -1 outside the threshold. */
  hitTest(x: number, y: number, threshold = 6): number {
    let best = -1;
    let bestDist = threshold;
    this.strokes.forEach((stroke, i) => {
      for (let k = 0; k + 1 < stroke.length; k++) {
        const d = segmentDistance(x, y, stroke[k], stroke[k + 1]);
        if (d < bestDist) {
          bestDist = d;
          best = i;
        }
      }
    });
    return best;
  }

  serialize(): string {
    return JSON.stringify({ past: this.past, future: this.future });
  }

  static deserialize(text: string): StrokeEditor {
    const ed = new StrokeEditor();
    const doc = JSON.parse(text) as { past: EditAction[]; future: EditAction[] };
    ed.past = doc.past;
    ed.future = doc.future;
    return ed;
  }

  /** Rebuild history from a bare stroke list (server session restore). */
  static fromStrokes(strokes: Stroke[]): StrokeEditor {
    const ed = new StrokeEditor();
    for (const s of strokes) ed.apply({ type: "draw", stroke: s });
    return ed;
  }
}

function segmentDistance(
  x: number, y: number, a: [number, number], b: [number, number],
): number {
  const dx = b[0] - a[0];
  const dy = b[1] - a[1];
  const l2 = dx * dx + dy * dy;
  let t = l2 === 0 ? 0 : ((x - a[0]) * dx + (y - a[1]) * dy) / l2;
  t = Math.max(0, Math.min(1, t));
  const px = a[0] + t * dx;
  const py = a[1] + t * dy;
  return Math.hypot(x - px, y - py);
}
