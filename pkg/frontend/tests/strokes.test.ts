import { describe, expect, it } from "vitest";
import { EditAction, EditEvent, replayActions, StrokeEditor } from "../src/strokes";
import type { Stroke } from "../src/types";

// deterministic LCG so the property scripts are reproducible
function lcg(seed: number) {
  let s = seed >>> 0;
  return () => {
    s = (s * 1664525 + 1013904223) >>> 0;
    return s / 2 ** 32;
  };
}

function randomStroke(rnd: () => number): Stroke {
  const n = 2 + Math.floor(rnd() * 4);
  return Array.from({ length: n }, () => [rnd() * 64, rnd() * 64] as [number, number]);
}

describe("stroke editor", () => {
  it("draw then undo restores the prior state", () => {
    const ed = new StrokeEditor();
    ed.apply({ type: "draw", stroke: [[0, 0], [5, 5]] });
    const before = JSON.stringify(ed.strokes);
    ed.apply({ type: "draw", stroke: [[1, 1], [9, 2]] });
    ed.apply({ type: "undo" });
    expect(JSON.stringify(ed.strokes)).toBe(before);
    expect(ed.canRedo).toBe(true);
    ed.apply({ type: "redo" });
    expect(ed.strokes.length).toBe(2);
  });

  it("erase on an empty canvas is a no-op", () => {
    const ed = new StrokeEditor();
    ed.apply({ type: "erase", index: 0 });
    expect(ed.strokes).toEqual([]);
    expect(ed.canUndo).toBe(false);
  });

  it("undo/redo beyond the history is a no-op", () => {
    const ed = new StrokeEditor();
    ed.apply({ type: "undo" });
    ed.apply({ type: "redo" });
    expect(ed.strokes).toEqual([]);
  });

  it("drawing clears the redo stack", () => {
    const ed = new StrokeEditor();
    ed.apply({ type: "draw", stroke: [[0, 0], [5, 5]] });
    ed.apply({ type: "undo" });
    ed.apply({ type: "draw", stroke: [[3, 3], [7, 7]] });
    expect(ed.canRedo).toBe(false);
    expect(ed.strokes.length).toBe(1);
  });

  it("replays 50 random edit scripts identically to the effective action log", () => {
    for (let script = 0; script < 50; script++) {
      const rnd = lcg(1000 + script);
      const ed = new StrokeEditor();
      const events: EditEvent[] = [];
      const steps = 5 + Math.floor(rnd() * 40);
      for (let i = 0; i < steps; i++) {
        const r = rnd();
        let ev: EditEvent;
        if (r < 0.5) {
          ev = { type: "draw", stroke: randomStroke(rnd) };
        } else if (r < 0.7) {
          ev = { type: "erase", index: Math.floor(rnd() * (ed.strokes.length + 1)) };
        } else if (r < 0.88) {
          ev = { type: "undo" };
        } else {
          ev = { type: "redo" };
        }
        events.push(ev);
        ed.apply(ev);
        // invariant: current strokes == pure fold of the effective action log
        expect(ed.strokes).toEqual(replayActions(ed.actions as EditAction[]));
      }
    }
  });

  it("serializes and restores the full history", () => {
    const rnd = lcg(7);
    const ed = new StrokeEditor();
    for (let i = 0; i < 12; i++) {
      ed.apply({ type: "draw", stroke: randomStroke(rnd) });
    }
    ed.apply({ type: "undo" });
    const copy = StrokeEditor.deserialize(ed.serialize());
    expect(copy.strokes).toEqual(ed.strokes);
    expect(copy.canRedo).toBe(true);
    copy.apply({ type: "redo" });
    ed.apply({ type: "redo" });
    expect(copy.strokes).toEqual(ed.strokes);
  });

  it("rebuilds from a bare server stroke list", () => {
    const strokes: Stroke[] = [[[0, 0], [3, 3]], [[5, 5], [9, 9]]];
    const ed = StrokeEditor.fromStrokes(strokes);
    expect(ed.strokes).toEqual(strokes);
    ed.apply({ type: "undo" });
    expect(ed.strokes).toEqual([strokes[0]]);
  });

  it("hit-tests the nearest stroke for erasing", () => {
    const ed = new StrokeEditor();
    ed.apply({ type: "draw", stroke: [[0, 10], [20, 10]] });
    ed.apply({ type: "draw", stroke: [[0, 40], [20, 40]] });
    expect(ed.hitTest(10, 11)).toBe(0);
    expect(ed.hitTest(10, 38)).toBe(1);
    expect(ed.hitTest(10, 25)).toBe(-1);
  });
});
