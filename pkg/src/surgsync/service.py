"""HTTP access to recorded runs: browsing, frame/kinematics retrieval, and
annotation editing with optimistic revision checks.

Every error body has the same shape: {"status": int, "code": str,
"message": str}. Frame responses carry the packet's reference stamp in an
X-Ref-Stamp header so a client can line pixels up with kinematics without a
second request.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Tuple

from fastapi import Body, FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from . import store


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _error_response(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=status,
        content={"status": status, "code": code, "message": message},
    )


def create_app(data_root: Path, ui_dir: Optional[Path] = None) -> FastAPI:
    """Application factory; data_root is scanned per request so new runs show
    up without a restart."""
    data_root = Path(data_root)
    app = FastAPI(title="surgsync", docs_url="/docs")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def find_run(run_id: str) -> Tuple[Path, store.RunManifest]:
        for d in store.list_runs(data_root):
            try:
                m = store.load_manifest(d)
            except Exception:
                continue
            if m.run_id == run_id or d.name == run_id:
                return d, m
        raise ApiError(404, "run_not_found", f"no run {run_id!r} under {data_root}")

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return _error_response(exc.status, exc.code, exc.message)

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return _error_response(422, "invalid_request", str(exc))

    @app.exception_handler(Exception)
    async def _unhandled(request: Request, exc: Exception):
        return _error_response(500, "internal_error", f"{type(exc).__name__}: {exc}")

    @app.get("/runs")
    def list_all_runs():
        out = []
        for d in store.list_runs(data_root):
            try:
                m = store.load_manifest(d)
            except Exception:
                continue
            out.append(
                {
                    "run_id": m.run_id,
                    "recorder_mode": m.recorder_mode,
                    "packet_count": m.packet_count,
                    "reject_count": m.reject_count,
                    "drop_count": m.drop_count,
                    "views": [s.label for s in m.image_streams()],
                    "streams": [s.to_dict() for s in m.streams],
                    "dirty": m.dirty,
                }
            )
        return out

    @app.get("/runs/{run_id}")
    def run_detail(run_id: str):
        _, m = find_run(run_id)
        return m.to_dict()

    @app.get("/runs/{run_id}/frames/{view}/{index}")
    def get_frame(run_id: str, view: str, index: int):
        run_dir, m = find_run(run_id)
        if view not in [s.label for s in m.image_streams()]:
            raise ApiError(404, "view_not_found", f"run has no view {view!r}")
        if not 0 <= index < m.packet_count:
            raise ApiError(
                404,
                "frame_not_found",
                f"index {index} outside 0..{m.packet_count - 1}",
            )
        path = store.frame_path(run_dir, view, index)
        if not path.is_file():
            raise ApiError(404, "frame_not_found", f"missing file for index {index}")
        headers = {}
        if index < len(m.ref_stamps):
            headers["X-Ref-Stamp"] = str(m.ref_stamps[index])
        return FileResponse(path, media_type="image/png", headers=headers)

    @app.get("/runs/{run_id}/kinematics")
    def get_kinematics(
        run_id: str,
        stream: str,
        from_ts: Optional[int] = Query(None, alias="from"),
        to_ts: Optional[int] = Query(None, alias="to"),
    ):
        run_dir, m = find_run(run_id)
        try:
            m.descriptor(stream)
        except KeyError:
            raise ApiError(404, "stream_not_found", f"run has no stream {stream!r}")
        try:
            lines = store.read_records(run_dir, stream)
        except store.StoreError as exc:
            raise ApiError(404, "stream_not_found", str(exc))
        records = [
            {"stamp": ln.stamp_ns, "values": list(ln.values), "delta_ns": ln.delta_ns}
            for ln in lines
            if (from_ts is None or ln.stamp_ns >= from_ts)
            and (to_ts is None or ln.stamp_ns <= to_ts)
        ]
        return {"run_id": m.run_id, "stream": stream, "records": records}

    @app.get("/runs/{run_id}/annotations")
    def get_annotations(run_id: str):
        run_dir, _ = find_run(run_id)
        return store.read_annotations(run_dir).to_dict()

    @app.put("/runs/{run_id}/annotations")
    def put_annotations(run_id: str, payload: dict = Body(...)):
        run_dir, _ = find_run(run_id)
        try:
            aset = store.AnnotationSet.from_dict(payload)
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ApiError(422, "invalid_annotations", f"malformed payload: {exc}")
        try:
            stored = store.write_annotations(run_dir, aset)
        except store.AnnotationValidationError as exc:
            raise ApiError(422, "invalid_annotations", str(exc))
        except store.AnnotationConflictError as exc:
            raise ApiError(409, "revision_conflict", str(exc))
        return stored.to_dict()

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def serve(
    data_root: Path,
    host: str = "127.0.0.1",
    port: int = 8787,
    ui_dir: Optional[Path] = None,
) -> None:
    import uvicorn

    uvicorn.run(create_app(data_root, ui_dir), host=host, port=port, log_level="warning")
