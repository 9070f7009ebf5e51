import { ApiClient, ApiError } from "./api";
import { SketchCanvas } from "./canvas";
import { MeshViewer } from "./viewer";
import type { CanvasId, SessionInfo, Stroke } from "./types";

const STROKE_WIDTH = 1.5;
const SYNC_DEBOUNCE_MS = 250;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

class App {
  private api = new ApiClient("");
  private session!: SessionInfo;
  private canvases = new Map<CanvasId, SketchCanvas>();
  private viewer!: MeshViewer;
  private syncTimers = new Map<CanvasId, number>();
  private pendingSync = new Map<CanvasId, Promise<unknown>>();
  private status = () => el<HTMLSpanElement>("status");

  async start() {
    const existing = new URLSearchParams(location.search).get("session");
    if (existing) {
      try {
        const state = await this.api.getSession(existing);
        this.session = {
          id: state.id,
          resolution: 0, views: 2, heightfield_n: 0,
        } as SessionInfo;
      } catch {
        this.session = await this.api.createSession();
      }
    }
    if (!this.session) this.session = await this.api.createSession();
    if (!this.session.resolution) {
      // restored sessions carry no rig info in their state; ask for a fresh one
      const probe = await this.api.createSession();
      this.session.resolution = probe.resolution;
      this.session.heightfield_n = probe.heightfield_n;
      this.session.views = probe.views;
      await this.api.deleteSession(probe.id);
    }
    history.replaceState(null, "", `?session=${this.session.id}`);

    const res = this.session.resolution;
    this.viewer = new MeshViewer(el("viewer"));
    this.setupCanvas("topdown", el<HTMLCanvasElement>("canvas-topdown"), res);
    this.setupCanvas("perspective", el<HTMLCanvasElement>("canvas-perspective"), res);
    await this.restoreStrokes();

    el<HTMLButtonElement>("btn-project").onclick = () => this.project();
    el<HTMLButtonElement>("btn-reconstruct").onclick = () => this.reconstruct(false);
    el<HTMLButtonElement>("btn-resample").onclick = () => this.reconstruct(true);
    el<HTMLInputElement>("overlay-opacity").oninput = (e) => {
      const v = Number((e.target as HTMLInputElement).value) / 100;
      const c = this.canvases.get("perspective");
      if (c) {
        c.overlayOpacity = v;
        c.render();
      }
    };
    for (const canvas of ["topdown", "perspective"] as CanvasId[]) {
      el<HTMLButtonElement>(`btn-undo-${canvas}`).onclick =
        () => this.canvases.get(canvas)?.undo();
      el<HTMLButtonElement>(`btn-redo-${canvas}`).onclick =
        () => this.canvases.get(canvas)?.redo();
      el<HTMLSelectElement>(`tool-${canvas}`).onchange = (e) => {
        const c = this.canvases.get(canvas);
        if (c) c.tool = (e.target as HTMLSelectElement).value as "draw" | "erase";
      };
      el<HTMLButtonElement>(`btn-zoom-${canvas}`).onclick = () => {
        const c = this.canvases.get(canvas);
        if (c) {
          c.setZoom(c.zoom === 1 ? 2 : 1);
          el(`btn-zoom-${canvas}`).textContent = `zoom ${c.zoom}x`;
        }
      };
      el<HTMLInputElement>(`underlay-${canvas}`).onchange =
        (e) => this.uploadUnderlay(canvas, e.target as HTMLInputElement);
    }
    this.status().textContent = `session ${this.session.id} ready`;
  }

  private setupCanvas(id: CanvasId, node: HTMLCanvasElement, resolution: number) {
    const canvas = new SketchCanvas(node, resolution);
    canvas.onChange = () => this.scheduleSync(id);
    this.canvases.set(id, canvas);
  }

  private async restoreStrokes() {
    const state = await this.api.getSession(this.session.id);
    for (const [canvasId, payload] of Object.entries(state.strokes)) {
      const canvas = this.canvases.get(canvasId as CanvasId);
      if (canvas && payload) {
        canvas.editor = (await import("./strokes")).StrokeEditor.fromStrokes(
          payload.strokes as Stroke[]);
        canvas.render();
      }
    }
  }

  /** Debounced full-replace stroke sync; drawing never waits on the network. */
  private scheduleSync(id: CanvasId) {
    const prev = this.syncTimers.get(id);
    if (prev !== undefined) clearTimeout(prev);
    this.syncTimers.set(id, window.setTimeout(() => this.sync(id), SYNC_DEBOUNCE_MS));
  }

  private sync(id: CanvasId): Promise<unknown> {
    const canvas = this.canvases.get(id);
    if (!canvas) return Promise.resolve();
    const task = this.api
      .putStrokes(this.session.id, id, {
        strokes: canvas.editor.strokes,
        width: STROKE_WIDTH,
      })
      .catch((err) => {
        this.status().textContent = `sync failed (${err}); retrying`;
        this.scheduleSync(id);
      });
    this.pendingSync.set(id, task);
    return task;
  }

  private async flushSync() {
    for (const id of this.canvases.keys()) {
      const t = this.syncTimers.get(id);
      if (t !== undefined) {
        clearTimeout(t);
        await this.sync(id);
      }
    }
    await Promise.all(this.pendingSync.values());
  }

  private async project() {
    await this.flushSync();
    try {
      const res = await this.api.project(this.session.id);
      const overlay = res.strokes as Stroke[];
      this.canvases.get("perspective")?.setOverlay(overlay);
      this.status().textContent = `projected ${overlay.length} polylines`;
    } catch (err) {
      this.status().textContent = `projection failed: ${err}`;
    }
  }

  private async reconstruct(resample: boolean) {
    await this.flushSync();
    const btn = el<HTMLButtonElement>("btn-reconstruct");
    btn.disabled = true;
    this.status().textContent = "reconstructing...";
    const t0 = performance.now();
    try {
      const opts: { seed?: number } = {};
      if (resample) opts.seed = Math.floor(Math.random() * 1e9);
      const res = await this.api.reconstruct(this.session.id, opts);
      const obj = await this.api.fetchMeshObj(this.session.id);
      this.viewer.setMeshFromObj(obj);
      const secs = ((performance.now() - t0) / 1000).toFixed(2);
      el("badge-buildings").textContent = `${res.n_buildings} buildings`;
      el("badge-latency").textContent = `${secs}s (server ${res.timings.total_s.toFixed(2)}s)`;
      this.status().textContent = `done; seed ${res.seed}`;
    } catch (err) {
      this.status().textContent = err instanceof ApiError && err.status === 422
        ? `cannot reconstruct yet: ${err.message}`
        : `reconstruction failed: ${err}`;
    } finally {
      btn.disabled = false;
    }
  }

  private async uploadUnderlay(id: CanvasId, input: HTMLInputElement) {
    const file = input.files?.[0];
    if (!file) return;
    try {
      await this.api.putUnderlay(this.session.id, id, file);
      const img = new Image();
      img.onload = () => this.canvases.get(id)?.setUnderlay(img);
      img.src = URL.createObjectURL(file);
      this.status().textContent = `underlay set on ${id}`;
    } catch (err) {
      this.status().textContent = `underlay rejected: ${err}`;
    }
  }
}

new App().start().catch((err) => {
  document.body.insertAdjacentHTML(
    "beforeend", `<pre class="fatal">failed to start: ${err}</pre>`);
});
