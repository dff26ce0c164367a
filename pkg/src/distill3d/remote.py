"""Remote denoiser wire protocol client.

HTTP, JSON bodies; images travel as base64 little-endian float32 with an
explicit shape. The server performs the classifier-free combination
(cond/uncond) itself, halving round-trips; /v1/info advertises this so
clients never double-apply guidance.
"""

from __future__ import annotations

import base64
import time

import numpy as np
import requests

from .priors import Condition, DEFAULT_SCHEDULE

PROTOCOL_VERSION = 1


class RemoteProtocolError(Exception):
    def __init__(self, message, code=None, status=None):
        super().__init__(message)
        self.code = code
        self.status = status


def encode_image(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_image(payload: dict) -> np.ndarray:
    raw = base64.b64decode(payload["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(payload["shape"]).copy()


def encode_condition(condition: Condition) -> dict:
    ids = list(condition.ids)
    return {
        "concept_id": ids[0] if ids else 0,
        "view_token": ids[1] if len(ids) > 1 else None,
        "identity_token": ids[2] if len(ids) > 2 else None,
    }


def decode_condition(payload: dict) -> Condition:
    ids = [payload.get("concept_id", 0)]
    for key in ("view_token", "identity_token"):
        if payload.get(key) is not None:
            ids.append(payload[key])
    return Condition.of(*ids)


class RemoteDenoiser:
    """Denoiser-protocol client; drop-in for in-process denoisers."""

    def __init__(self, url: str, model_id: str = "default",
                 schedule=DEFAULT_SCHEDULE, timeout: float = 30.0,
                 session=None):
        self.url = url.rstrip("/")
        self.model_id = model_id
        self.schedule = schedule
        self.timeout = timeout
        self.session = session or requests.Session()
        self.info = self._fetch_info()
        if self.info["protocol_version"] != PROTOCOL_VERSION:
            raise RemoteProtocolError(
                f"server speaks protocol {self.info['protocol_version']}, "
                f"client speaks {PROTOCOL_VERSION}", code="version_mismatch")

    def _fetch_info(self) -> dict:
        r = self.session.get(f"{self.url}/v1/info", timeout=self.timeout)
        r.raise_for_status()
        return r.json()

    def labels(self):
        return self.info.get("labels", [])

    def _post(self, noisy: np.ndarray, t: float, condition: Condition,
              w: float) -> np.ndarray:
        body = {
            "protocol_version": PROTOCOL_VERSION,
            "model_id": self.model_id,
            "t": float(t),
            "condition": encode_condition(condition),
            "image": encode_image(noisy),
            "cfg": float(w),
        }
        r = self.session.post(f"{self.url}/v1/denoise", json=body,
                              timeout=self.timeout)
        if r.status_code != 200:
            try:
                err = r.json()
            except Exception:
                err = {}
            raise RemoteProtocolError(err.get("message", r.text),
                                      code=err.get("code"), status=r.status_code)
        payload = r.json()
        out = decode_image(payload["image"])
        if out.shape != np.shape(noisy):
            raise RemoteProtocolError(
                f"response shape {out.shape} != request {np.shape(noisy)}",
                code="shape_mismatch")
        return out.astype(np.asarray(noisy).dtype)

    def denoise(self, noisy: np.ndarray, t: float, condition: Condition) -> np.ndarray:
        return self._post(noisy, t, condition, 1.0)

    def denoise_cfg(self, noisy: np.ndarray, t: float, condition: Condition,
                    w: float) -> np.ndarray:
        # server-side CFG: one request carries the guidance weight
        return self._post(noisy, t, condition, w)


def protocol_check(url: str, oracle, n_cases: int = 8, tol: float = 1e-5,
                   seed: int = 0, model_id: str = "default") -> dict:
    """Golden-request conformance: the server must agree with the
    in-process analytic oracle within tol, and reject malformed requests
    with machine-readable codes."""
    rng = np.random.default_rng(seed)
    client = RemoteDenoiser(url, model_id=model_id, schedule=oracle.schedule)
    shape = oracle.image_shape
    label = oracle.labels()[0]
    cases, failures = [], []

    def check(name, t, image, w):
        want = _oracle_cfg(oracle, image, t, Condition.of(label), w)
        got = client.denoise_cfg(image.astype("<f4"), t, Condition.of(label), w)
        err = float(np.max(np.abs(got.astype(np.float64) - want)))
        ok = err <= tol
        cases.append({"name": name, "t": t, "cfg": w, "max_err": err, "ok": ok})
        if not ok:
            failures.append(name)

    img0 = rng.random(shape).astype(np.float32)
    check("t0_identity", 0.0, img0, 1.0)
    check("t_high_posterior_mean", 0.999, rng.random(shape).astype(np.float32), 1.0)
    for i in range(n_cases):
        check(f"random_{i}", float(rng.uniform(0.05, 0.95)),
              rng.random(shape).astype(np.float32),
              float(rng.choice([0.0, 1.0, 3.0, 10.0])))

    # malformed shape must produce a structured error, not a 200
    bad = {"protocol_version": PROTOCOL_VERSION, "model_id": model_id,
           "t": 0.5, "condition": {"concept_id": label},
           "image": {"shape": [3, 3], "data": base64.b64encode(
               np.zeros(4, "<f4").tobytes()).decode()},
           "cfg": 1.0}
    r = requests.post(f"{url.rstrip('/')}/v1/denoise", json=bad, timeout=30)
    shape_error_ok = (400 <= r.status_code < 500
                      and r.json().get("code") is not None)
    if not shape_error_ok:
        failures.append("malformed_shape_error")
    cases.append({"name": "malformed_shape_error", "ok": shape_error_ok,
                  "status": r.status_code})
    return {"url": url, "passed": not failures, "failures": failures,
            "cases": cases, "info": client.info}


def _oracle_cfg(oracle, image, t, condition, w):
    from .priors import cfg_denoise
    x = image.astype(np.float64)
    return cfg_denoise(oracle, x, t, condition, w)
