"""HTTP service exposing sessions, stroke submission, stroke projection,
reconstruction and mesh export over JSON.

Sessions are in-memory. Model weights are shared read-only; each session
serializes its own reconstructions (a later request simply reruns on the
newest strokes), while stroke updates use a separate short lock so drawing
never waits on an in-flight reconstruction.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid
from dataclasses import dataclass, field

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import PlainTextResponse
from pydantic import BaseModel, Field

from .dataset import encode_depth16
from .geometry import write_obj
from .pipeline import CANVASES, ModelBundle, ReconstructionError, StrokeSet, rasterize


def obj_text(mesh) -> str:
    buf = io.StringIO()
    write_obj(mesh, buf)
    return buf.getvalue()


@dataclass
class Session:
    id: str
    strokes: dict = field(default_factory=dict)       # canvas -> StrokeSet
    underlays: dict = field(default_factory=dict)     # canvas -> png bytes
    seed: int = 0
    result: dict | None = None
    mesh_obj: str | None = None
    created: float = field(default_factory=time.time)
    updated: float = field(default_factory=time.time)
    stroke_lock: threading.Lock = field(default_factory=threading.Lock)
    recon_lock: threading.Lock = field(default_factory=threading.Lock)

    def to_jsonable(self):
        return {
            "id": self.id,
            "seed": self.seed,
            "strokes": {c: s.to_jsonable() for c, s in self.strokes.items()},
            "underlays": sorted(self.underlays),
            "created": self.created,
            "updated": self.updated,
            "last_reconstruction": None if self.result is None else {
                "n_buildings": self.result["n_buildings"],
                "seed": self.result["seed"],
                "steps": self.result["steps"],
                "views": self.result["views"],
                "timings": self.result["timings"],
            },
        }


class StrokesBody(BaseModel):
    strokes: list[list[list[float]]] = Field(default_factory=list)
    width: float = 1.5


class ReconstructBody(BaseModel):
    views: int = 1
    seed: int | None = None
    steps: int | None = None


class ProjectBody(BaseModel):
    view: int = 0


def create_app(bundle: ModelBundle, ui_dir=None) -> FastAPI:
    app = FastAPI(title="citysketch")
    sessions: dict[str, Session] = {}
    store_lock = threading.Lock()
    res = bundle.cfg.raster.resolution

    if ui_dir is not None:
        from pathlib import Path
        from fastapi.staticfiles import StaticFiles
        if Path(ui_dir).exists():
            app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    def get_session(sid: str) -> Session:
        s = sessions.get(sid)
        if s is None:
            raise HTTPException(404, f"no session {sid}")
        return s

    @app.get("/health")
    def health():
        return {"status": "ok", "resolution": res,
                "heightfield_n": bundle.cfg.raster.heightfield_n}

    @app.post("/sessions", status_code=201)
    def create_session():
        sid = uuid.uuid4().hex[:12]
        with store_lock:
            sessions[sid] = Session(id=sid)
        return {"id": sid, "resolution": res,
                "views": 1 + len(bundle.extra_cams),
                "heightfield_n": bundle.cfg.raster.heightfield_n}

    @app.get("/sessions/{sid}")
    def get_state(sid: str):
        return get_session(sid).to_jsonable()

    @app.delete("/sessions/{sid}")
    def delete_session(sid: str):
        with store_lock:
            if sid not in sessions:
                raise HTTPException(404, f"no session {sid}")
            del sessions[sid]
        return {"deleted": sid}

    @app.put("/sessions/{sid}/strokes/{canvas}")
    def put_strokes(sid: str, canvas: str, body: StrokesBody):
        s = get_session(sid)
        if canvas not in CANVASES:
            raise HTTPException(422, f"unknown canvas {canvas!r}")
        for stroke in body.strokes:
            if len(stroke) < 2:
                raise HTTPException(422, "strokes need at least two points")
            for pt in stroke:
                if not (0 <= pt[0] <= res and 0 <= pt[1] <= res):
                    raise HTTPException(422, f"point {pt} outside canvas bounds")
        try:
            ss = StrokeSet(canvas=canvas, strokes=body.strokes, width=body.width)
        except ValueError as e:
            raise HTTPException(422, str(e))
        with s.stroke_lock:
            s.strokes[canvas] = ss
            s.updated = time.time()
        return {"canvas": canvas, "n_strokes": len(ss.strokes)}

    @app.post("/sessions/{sid}/project")
    def project(sid: str, body: ProjectBody):
        s = get_session(sid)
        with s.stroke_lock:
            ss = s.strokes.get("topdown")
        if ss is None or ss.empty:
            return {"strokes": []}
        try:
            polylines = bundle.project_topdown_strokes(ss, view=body.view)
        except ReconstructionError as e:
            raise HTTPException(422, str(e))
        return {"strokes": [p.tolist() for p in polylines]}

    @app.post("/sessions/{sid}/reconstruct")
    def reconstruct(sid: str, body: ReconstructBody):
        s = get_session(sid)
        if body.seed is not None:
            s.seed = body.seed
        if body.views < 1 or body.views > 1 + len(bundle.extra_cams):
            raise HTTPException(422, f"views must be in [1, {1 + len(bundle.extra_cams)}]")
        # serialize per session; the newest strokes win when we finally run
        with s.recon_lock:
            with s.stroke_lock:
                td = s.strokes.get("topdown")
                view_sets = [s.strokes.get("perspective")]
                if body.views >= 2:
                    view_sets.append(s.strokes.get("perspective2"))
            if td is None or td.empty:
                raise HTTPException(422, "top-down canvas is empty")
            for i, vs in enumerate(view_sets):
                if vs is None or vs.empty:
                    name = "perspective" if i == 0 else "perspective2"
                    raise HTTPException(422, f"{name} canvas is empty")
            s_t = rasterize(td, res)
            s_p = [rasterize(vs, res) for vs in view_sets]
            try:
                result = bundle.reconstruct(
                    s_t, s_p, seed=s.seed, steps=body.steps,
                    views=list(range(body.views)),
                )
            except ReconstructionError as e:
                raise HTTPException(500, f"reconstruction failed: {e}")
            s.result = result
            s.mesh_obj = obj_text(result["mesh"])
            s.updated = time.time()
        return {
            "n_buildings": result["n_buildings"],
            "seed": result["seed"],
            "steps": result["steps"],
            "views": result["views"],
            "timings": result["timings"],
            "mesh_url": f"/sessions/{sid}/mesh.obj",
            "heightfield_url": f"/sessions/{sid}/heightfield.png",
        }

    @app.get("/sessions/{sid}/mesh.obj")
    def mesh_obj(sid: str):
        s = get_session(sid)
        if s.mesh_obj is None:
            raise HTTPException(404, "no reconstruction yet")
        return PlainTextResponse(s.mesh_obj, media_type="text/plain")

    @app.get("/sessions/{sid}/heightfield.png")
    def heightfield_png(sid: str):
        s = get_session(sid)
        if s.result is None:
            raise HTTPException(404, "no reconstruction yet")
        png, sidecar = encode_depth16(s.result["d_t"])
        return Response(png, media_type="image/png",
                        headers={"X-Depth-Sidecar": json.dumps(sidecar)})

    @app.put("/sessions/{sid}/underlay/{canvas}")
    async def put_underlay(sid: str, canvas: str, request: Request):
        s = get_session(sid)
        if canvas not in CANVASES:
            raise HTTPException(422, f"unknown canvas {canvas!r}")
        body = await request.body()
        if not body.startswith(b"\x89PNG"):
            raise HTTPException(422, "underlay must be a PNG")
        with s.stroke_lock:
            s.underlays[canvas] = body
            s.updated = time.time()
        return {"canvas": canvas, "bytes": len(body)}

    @app.get("/sessions/{sid}/underlay/{canvas}")
    def get_underlay(sid: str, canvas: str):
        s = get_session(sid)
        if canvas not in s.underlays:
            raise HTTPException(404, "no underlay")
        return Response(s.underlays[canvas], media_type="image/png")

    return app
