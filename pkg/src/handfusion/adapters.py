"""HTTP plumbing shared by the remote model adapters, plus PNG helpers."""

from __future__ import annotations

import io
import json
import logging
import os
import urllib.error
import urllib.request
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

ENV_TEMPLATE = "HANDFUSION_ADAPTER_{name}_URL"


class AdapterError(RuntimeError):
    """A model adapter could not produce a result (unreachable, bad reply, ...)."""


def adapter_url(name: str, default: str | None = None) -> str | None:
    key = ENV_TEMPLATE.format(name=name.upper().replace("-", "_"))
    return os.environ.get(key, default)


def image_to_png(image: np.ndarray) -> bytes:
    """Encode a [C,H,W] or [H,W] float image in [0,1] as 8-bit grayscale/RGB PNG."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    return buf.getvalue()


def png_to_image(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("L") if im.mode not in ("L", "RGB") else im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.moveaxis(arr, -1, 0)


def save_png(path: str | os.PathLike, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(image_to_png(image))
    return path


def load_png(path: str | os.PathLike) -> np.ndarray:
    return png_to_image(Path(path).read_bytes())


def quantize(image: np.ndarray) -> np.ndarray:
    """The values an image takes after a PNG round-trip."""
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def post(url: str, body: bytes, content_type: str, timeout: float = 30.0) -> Any:
    req = urllib.request.Request(url, data=body, method="POST", headers={"Content-Type": content_type})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            payload = resp.read()
    except (urllib.error.URLError, OSError) as exc:
        raise AdapterError(f"POST {url} failed: {exc}") from exc
    try:
        return json.loads(payload)
    except json.JSONDecodeError as exc:
        raise AdapterError(f"POST {url} returned non-JSON body") from exc


def post_json(url: str, obj: Any, timeout: float = 30.0) -> Any:
    return post(url, json.dumps(obj).encode("utf-8"), "application/json", timeout)


def post_png(url: str, image: np.ndarray, timeout: float = 30.0) -> Any:
    return post(url, image_to_png(image), "image/png", timeout)


def reply_field(reply: Any, key: str, url: str) -> Any:
    if not isinstance(reply, dict) or key not in reply:
        raise AdapterError(f"{url}: reply lacks {key!r}")
    return reply[key]
