export type Point = [number, number];
export type Stroke = Point[];
export type CanvasId = "topdown" | "perspective" | "perspective2";

export interface StrokeSetPayload {
  strokes: Stroke[];
  width: number;
}

export interface SessionInfo {
  id: string;
  resolution: number;
  views: number;
  heightfield_n: number;
}

export interface SessionState {
  id: string;
  seed: number;
  strokes: Partial<Record<CanvasId, StrokeSetPayload & { canvas: string }>>;
  underlays: string[];
  last_reconstruction: {
    n_buildings: number;
    seed: number;
    steps: number;
    views: number[];
    timings: Record<string, number>;
  } | null;
}

export interface ReconstructResponse {
  n_buildings: number;
  seed: number;
  steps: number;
  views: number[];
  timings: Record<string, number>;
  mesh_url: string;
  heightfield_url: string;
}

export interface ProjectResponse {
  strokes: Stroke[][] | number[][][];
}
