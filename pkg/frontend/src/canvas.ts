import { StrokeEditor } from "./strokes";
import type { Stroke } from "./types";

export type Tool = "draw" | "erase";

/**
 * One sketch canvas: freehand drawing in logical (server) coordinates with
 * 1x / 2x zoom, an optional underlay image, and a read-only projected overlay
 * rendered underneath the user's strokes.
 */
export class SketchCanvas {
  editor = new StrokeEditor();
  tool: Tool = "draw";
  zoom: 1 | 2 = 1;
  overlay: Stroke[] = [];
  overlayOpacity = 0.35;
  underlay: HTMLImageElement | null = null;
  onChange: () => void = () => {};

  private ctx: CanvasRenderingContext2D;
  private current: Stroke | null = null;

  constructor(
    private el: HTMLCanvasElement,
    public resolution: number,
    private displaySize = 320,
  ) {
    this.el.width = this.displaySize;
    this.el.height = this.displaySize;
    const ctx = el.getContext("2d");
    if (!ctx) throw new Error("2d canvas unavailable");
    this.ctx = ctx;
    el.style.touchAction = "none";
    el.addEventListener("pointerdown", (e) => this.onDown(e));
    el.addEventListener("pointermove", (e) => this.onMove(e));
    el.addEventListener("pointerup", (e) => this.onUp(e));
    el.addEventListener("pointerleave", (e) => this.onUp(e));
    this.render();
  }

  /** CSS pixel -> logical server coordinate, honoring zoom (centered). */
  toLogical(e: PointerEvent): [number, number] {
    const rect = this.el.getBoundingClientRect();
    const sx = ((e.clientX - rect.left) / rect.width) * this.displaySize;
    const sy = ((e.clientY - rect.top) / rect.height) * this.displaySize;
    const scale = (this.resolution / this.displaySize) / this.zoom;
    const off = (this.resolution - this.resolution / this.zoom) / 2;
    const x = sx * scale + off;
    const y = sy * scale + off;
    return [
      Math.max(0, Math.min(this.resolution, x)),
      Math.max(0, Math.min(this.resolution, y)),
    ];
  }

  private onDown(e: PointerEvent) {
    this.el.setPointerCapture(e.pointerId);
    const p = this.toLogical(e);
    if (this.tool === "erase") {
      const idx = this.editor.hitTest(p[0], p[1], 8);
      if (idx >= 0) {
        this.editor.apply({ type: "erase", index: idx });
        this.onChange();
        this.render();
      }
      return;
    }
    this.current = [p];
  }

  private onMove(e: PointerEvent) {
    if (!this.current) return;
    const p = this.toLogical(e);
    const last = this.current[this.current.length - 1];
    if (Math.hypot(p[0] - last[0], p[1] - last[1]) >= 0.75) {
      this.current.push(p);
      this.render();
    }
  }

  private onUp(_e: PointerEvent) {
    if (!this.current) return;
    if (this.current.length >= 2) {
      this.editor.apply({ type: "draw", stroke: this.current });
      this.onChange();
    }
    this.current = null;
    this.render();
  }

  undo() {
    this.editor.apply({ type: "undo" });
    this.onChange();
    this.render();
  }

  redo() {
    this.editor.apply({ type: "redo" });
    this.onChange();
    this.render();
  }

  clear() {
    this.editor.clear();
    this.onChange();
    this.render();
  }

  setZoom(z: 1 | 2) {
    this.zoom = z;
    this.render();
  }

  setOverlay(polylines: Stroke[]) {
    this.overlay = polylines;
    this.render();
  }

  setUnderlay(img: HTMLImageElement | null) {
    this.underlay = img;
    this.render();
  }

  private toScreen(p: [number, number]): [number, number] {
    const off = (this.resolution - this.resolution / this.zoom) / 2;
    const scale = (this.displaySize / this.resolution) * this.zoom;
    return [(p[0] - off) * scale, (p[1] - off) * scale];
  }

  render() {
    const c = this.ctx;
    c.save();
    c.fillStyle = "#ffffff";
    c.fillRect(0, 0, this.displaySize, this.displaySize);
    if (this.underlay) {
      c.globalAlpha = 0.5;
      const off = (this.resolution - this.resolution / this.zoom) / 2;
      const scale = (this.displaySize / this.resolution) * this.zoom;
      c.drawImage(this.underlay, -off * scale, -off * scale,
                  this.resolution * scale, this.resolution * scale);
      c.globalAlpha = 1;
    }
    // projected overlay sits under user strokes and is never editable
    if (this.overlay.length) {
      c.strokeStyle = "#2a6fdb";
      c.globalAlpha = this.overlayOpacity;
      c.lineWidth = 1.5;
      for (const poly of this.overlay) this.path(poly);
      c.globalAlpha = 1;
    }
    c.strokeStyle = "#1b1b1b";
    c.lineWidth = 2;
    c.lineCap = "round";
    for (const s of this.editor.strokes) this.path(s);
    if (this.current && this.current.length > 1) this.path(this.current);
    c.restore();
  }

  private path(points: Stroke) {
    const c = this.ctx;
    c.beginPath();
    points.forEach((p, i) => {
      const [x, y] = this.toScreen(p);
      if (i === 0) c.moveTo(x, y);
      else c.lineTo(x, y);
    });
    c.stroke();
  }
}
