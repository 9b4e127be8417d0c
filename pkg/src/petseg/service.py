"""Stateful HTTP inference service for interactive click-to-segment sessions.

A session caches the image embedding once, then refines the mask per prompt:
cumulative point set plus the previous probability mask as the dense prompt.
Sessions are independent single-writer state machines; the model is immutable
after load. All payloads carry schema tag "api/1".

Prompt coordinates on the wire: z = axis 0 (axial slice), y = axis 1,
x = axis 2 of the canonical D x H x W grid.
"""

from __future__ import annotations

import base64
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .metrics import dsc
from .net import NEGATIVE, POSITIVE, PromptPoint, SegModel, load_checkpoint
from .rle import rle_encode
from .volume import (DatasetManifest, Quality, extract_patch, load_label,
                     load_volume, normalize_intensity)

API_SCHEMA = "api/1"


class CreateSessionRequest(BaseModel):
    volume_id: str
    target: str | None = None


class PromptRequest(BaseModel):
    x: int
    y: int
    z: int
    polarity: str = "positive"  # positive | negative


@dataclass
class PromptSession:
    session_id: str
    volume_id: str
    image: np.ndarray  # normalized, model-input-sized
    embedding: torch.Tensor
    gt: np.ndarray | None
    prompts: list[PromptPoint] = field(default_factory=list)
    mask: np.ndarray = None  # current probability volume
    created: float = field(default_factory=time.time)
    updated: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.zeros(self.image.shape, dtype=np.float32)


class SessionStore:
    def __init__(self, model: SegModel, data_dir: Path | None):
        self.model = model
        self.data_dir = Path(data_dir) if data_dir else None
        self.manifest = None
        if self.data_dir and (self.data_dir / "manifest.json").exists():
            self.manifest = DatasetManifest.load(self.data_dir / "manifest.json")
        self.sessions: dict[str, PromptSession] = {}
        self._lock = threading.Lock()

    def _resolve(self, volume_id: str, target: str | None):
        if self.manifest is None or self.data_dir is None:
            raise HTTPException(404, f"no data directory serving volume {volume_id!r}")
        entry = next((e for e in self.manifest.entries if e.volume_id == volume_id), None)
        if entry is None:
            raise HTTPException(404, f"unknown volume {volume_id!r}")
        vol = normalize_intensity(load_volume(self.data_dir / entry.volume_path, id=volume_id))
        gt = None
        if target is None and entry.label_paths:
            target = sorted(entry.label_paths)[0]
        if target and target in entry.label_paths and entry.quality == Quality.HQ:
            gt = load_label(self.data_dir / entry.label_paths[target]).data
        size = self.model.cfg.input_size
        if vol.shape != tuple(size):
            center = tuple(s // 2 for s in vol.shape)
            img = extract_patch(vol.data, center, size)
            gt = extract_patch(gt, center, size) if gt is not None else None
        else:
            img = vol.data.copy()
        return img.astype(np.float32), gt

    def create(self, volume_id: str, target: str | None) -> PromptSession:
        img, gt = self._resolve(volume_id, target)
        x = torch.from_numpy(img).reshape(1, 1, *img.shape)
        with torch.no_grad():
            emb = self.model.encode_image(x)
        sess = PromptSession(session_id=uuid.uuid4().hex[:12], volume_id=volume_id,
                             image=img, embedding=emb, gt=gt)
        assert not sess.mask.any()  # interactive loops start from the all-zero mask
        with self._lock:
            self.sessions[sess.session_id] = sess
        return sess

    def get(self, session_id: str) -> PromptSession:
        sess = self.sessions.get(session_id)
        if sess is None:
            raise HTTPException(404, f"unknown session {session_id!r}")
        return sess

    def delete(self, session_id: str):
        with self._lock:
            if self.sessions.pop(session_id, None) is None:
                raise HTTPException(404, f"unknown session {session_id!r}")

    def prompt(self, session_id: str, point: PromptPoint) -> dict:
        sess = self.get(session_id)
        shape = sess.image.shape
        if not all(0 <= c < s for c, s in zip(point.coord, shape)):
            raise HTTPException(422, f"point {point.coord} outside volume bounds {shape}")
        with sess.lock:  # one in-flight decode per session
            prev_bin = sess.mask > 0.5
            prev = None
            if sess.prompts:
                prev = torch.from_numpy(sess.mask).reshape(1, 1, *shape)
            sess.prompts.append(point)
            with torch.no_grad():
                prob = self.model.decode(sess.embedding, sess.prompts, prev)
            sess.mask = prob.squeeze(0).cpu().numpy().astype(np.float32)
            sess.updated = time.time()
            new_bin = sess.mask > 0.5
            out = {
                "schema": API_SCHEMA,
                "session_id": session_id,
                "prompt_count": len(sess.prompts),
                "foreground_voxels": int(new_bin.sum()),
                "changed_voxels": int((prev_bin ^ new_bin).sum()),
            }
            if sess.gt is not None:
                out["dsc"] = dsc(sess.gt, new_bin.astype(np.uint8))
            return out


def _window_slice(img2d: np.ndarray) -> bytes:
    lo, hi = np.percentile(img2d, [1, 99])
    if hi <= lo:
        return np.zeros(img2d.shape, dtype=np.uint8).tobytes()
    scaled = np.clip((img2d - lo) / (hi - lo), 0, 1)
    return (scaled * 255).astype(np.uint8).tobytes()


def _take_slice(vol: np.ndarray, axis: int, index: int) -> np.ndarray:
    return np.take(vol, index, axis=axis)


def create_app(model: SegModel, data_dir=None, static_dir=None) -> FastAPI:
    app = FastAPI(title="petseg interactive segmentation service")
    store = SessionStore(model, data_dir)
    app.state.store = store

    @app.get("/healthz")
    def healthz():
        return {"schema": API_SCHEMA, "status": "ok",
                "input_size": list(model.cfg.input_size),
                "sessions": len(store.sessions)}

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest):
        sess = store.create(req.volume_id, req.target)
        return {"schema": API_SCHEMA, "session_id": sess.session_id,
                "volume_id": sess.volume_id,
                "shape": list(sess.image.shape),
                "has_gt": sess.gt is not None}

    @app.post("/sessions/{session_id}/prompts")
    def add_prompt(session_id: str, req: PromptRequest):
        if req.polarity not in ("positive", "negative"):
            raise HTTPException(422, f"bad polarity {req.polarity!r}")
        pol = POSITIVE if req.polarity == "positive" else NEGATIVE
        return store.prompt(session_id, PromptPoint(coord=(req.z, req.y, req.x), polarity=pol))

    @app.get("/sessions/{session_id}/slices/{axis}/{index}")
    def get_slice(session_id: str, axis: int, index: int):
        sess = store.get(session_id)
        if axis not in (0, 1, 2):
            raise HTTPException(422, f"axis must be 0, 1 or 2, got {axis}")
        if not (0 <= index < sess.image.shape[axis]):
            raise HTTPException(422, "index out of range")
        img2d = _take_slice(sess.image, axis, index)
        mask2d = (_take_slice(sess.mask, axis, index) > 0.5).astype(np.uint8)
        out = {
            "schema": API_SCHEMA,
            "axis": axis, "index": index,
            "shape": list(img2d.shape),
            "image_b64": base64.b64encode(_window_slice(img2d)).decode(),
            "mask_rle": rle_encode(mask2d),
        }
        if sess.gt is not None:
            out["gt_rle"] = rle_encode(_take_slice(sess.gt, axis, index))
        return out

    @app.get("/sessions/{session_id}/mask")
    def get_mask(session_id: str):
        sess = store.get(session_id)
        binary = (sess.mask > 0.5).astype(np.uint8)
        return {"schema": API_SCHEMA, "shape": list(binary.shape),
                "rle": rle_encode(binary),
                "prompt_count": len(sess.prompts)}

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str):
        store.delete(session_id)
        return {"schema": API_SCHEMA, "deleted": session_id}

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app


def serve(ckpt_path, data_dir=None, port: int = 8000, static_dir=None):
    import uvicorn

    model = load_checkpoint(ckpt_path)
    app = create_app(model, data_dir=data_dir, static_dir=static_dir)
    uvicorn.run(app, host="0.0.0.0", port=port)
