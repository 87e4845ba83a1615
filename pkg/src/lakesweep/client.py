"""Client library for the gateway; the ``lakesweep`` CLI is a thin shell over it.

Each call maps onto one HTTP endpoint. Apart from packing directories
into archives and checking arguments before anything is sent, the client
holds no logic of its own.
"""

from __future__ import annotations

import io
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence
from urllib.parse import urlparse

import httpx

from .domain import TERMINAL_STATES, ExperimentState, is_uid
from .errors import LakesweepError, TransportError
from .gemt import write_zip
from .sweep import Distribution, Operation


class ClientError(LakesweepError):
    """Bad arguments, caught before any request is sent."""


class ServerRejected(LakesweepError):
    """The gateway answered with an error; ``message`` is its text, verbatim."""

    def __init__(self, status: int, message: str, body: Mapping[str, Any] | None = None):
        super().__init__(message)
        self.status = status
        self.body = dict(body or {})

    @property
    def not_found(self) -> bool:
        return self.status == 404

    @property
    def fraction(self) -> float | None:
        return self.body.get("fraction")


@dataclass(frozen=True)
class Completion:
    uid: str
    state: ExperimentState
    fraction: float
    metrics: Mapping[str, Any] = field(default_factory=dict)
    reason: str | None = None

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES


def pack_directory(root: Path, flat: bool = False) -> bytes:
    """ZIP every regular file under ``root`` (relative names; hidden files skipped)."""
    entries = []
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root)
        if not p.is_file() or any(part.startswith(".") for part in rel.parts):
            continue
        entries.append((p.name if flat else rel.as_posix(), p.read_bytes()))
    return write_zip(entries)


def _check_uid(uid: str) -> str:
    if not is_uid(uid):
        raise ClientError(f"malformed uid {uid!r}: expected 40 lowercase hex characters")
    return uid


class ClientSession:
    """One user's connection to a gateway.

    ``http`` may be any ``httpx.Client``-compatible object (tests pass a
    FastAPI TestClient). Only status and results requests are retried;
    submissions and aborts are sent at most once.
    """

    def __init__(self, service_url: str, timeout: float = 60.0, retries: int = 3,
                 backoff: float = 0.25, http: httpx.Client | None = None):
        parsed = urlparse(service_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ClientError(f"service url must be http(s)://host[:port], got {service_url!r}")
        self.service_url = service_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.http = http or httpx.Client(timeout=timeout)
        self.last_uid: str | None = None

    # -- plumbing --------------------------------------------------------------

    def _request(self, method: str, path: str, idempotent: bool, **kw) -> httpx.Response:
        attempts = 1 + (self.retries if idempotent else 0)
        url = self.service_url + path
        for attempt in range(attempts):
            try:
                resp = self.http.request(method, url, **kw)
            except httpx.HTTPError as exc:
                if attempt + 1 < attempts:
                    time.sleep(self.backoff * 2**attempt)
                    continue
                raise TransportError(f"{method} {url}: {exc}") from None
            if resp.status_code >= 500 and attempt + 1 < attempts:
                time.sleep(self.backoff * 2**attempt)
                continue
            if resp.status_code >= 400:
                try:
                    body = resp.json()
                except ValueError:
                    body = {"error": resp.text}
                raise ServerRejected(resp.status_code, str(body.get("error") or body.get("detail")), body)
            return resp
        raise AssertionError("unreachable")

    def _submit(self, path: str, archive: bytes, form: Mapping[str, str] | None = None) -> str:
        resp = self._request("POST", path, False, files={"archive": ("upload.zip", archive, "application/zip")},
                             data=dict(form or {}))
        self.last_uid = resp.json()["uid"]
        return self.last_uid

    @staticmethod
    def _sim_dir(path: str | Path, driver_file: str) -> Path:
        d = Path(path)
        if not d.is_dir():
            raise ClientError(f"{d} is not a directory")
        if not (d / driver_file).is_file():
            raise ClientError(f"driver file {driver_file!r} not found in {d}")
        return d

    # -- experiment submission ---------------------------------------------------

    def run_experiment(self, exp_dir: str | Path) -> str:
        """Upload every simulation sub-directory of ``exp_dir`` as-is."""
        root = Path(exp_dir)
        if not root.is_dir():
            raise ClientError(f"{root} is not a directory")
        sims = [p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".") and any(p.iterdir())]
        if not sims:
            raise ClientError(f"{root} contains no simulation directories")
        return self._submit("/experiment", pack_directory(root))

    def run_sweep(self, sim_dir: str | Path, driver_file: str, parameter: str, start: float, end: float,
                  count: int, operation: str = "add") -> str:
        if int(count) < 1:
            raise ClientError(f"number of increments must be >= 1, got {count}")
        Operation.parse(operation)
        d = self._sim_dir(sim_dir, driver_file)
        params = (f"driver_file={driver_file}\nvariable={parameter}\nstart_value={float(start)!r}\n"
                  f"end_value={float(end)!r}\ncount={int(count)}\noperation={operation}\n")
        return self._submit("/experiment/sweep", pack_directory(d, flat=True), {"params": params})

    def run_sampled(self, sim_dir: str | Path, driver_file: str, parameter: str, distribution: str,
                    params: Mapping[str, float], count: int, operation: str = "add",
                    seed: int | None = None) -> str:
        if int(count) < 1:
            raise ClientError(f"count must be >= 1, got {count}")
        Distribution.parse(distribution)
        Operation.parse(operation)
        d = self._sim_dir(sim_dir, driver_file)
        lines = [f"driver_file={driver_file}", f"variable={parameter}", f"distribution={distribution}",
                 f"count={int(count)}", f"operation={operation}"]
        lines += [f"{k}={v}" for k, v in params.items()]
        if seed is not None:
            lines.append(f"seed={int(seed)}")
        return self._submit("/experiment/sampled", pack_directory(d, flat=True),
                            {"description": "\n".join(lines) + "\n"})

    # -- monitoring and retrieval --------------------------------------------------

    def check_completion(self, uid: str) -> Completion:
        doc = self._request("GET", f"/experiment/{_check_uid(uid)}/status", True).json()
        return Completion(uid, ExperimentState(doc["state"]), float(doc["fraction"]),
                          doc.get("metrics", {}), doc.get("reason"))

    def download_results(self, uid: str, sims: Sequence[int] | None = None,
                         columns: Sequence[str] | None = None) -> bytes:
        q = {}
        if sims:
            q["sims"] = ",".join(str(int(s)) for s in sims)
        if columns:
            q["columns"] = ",".join(columns)
        return self._request("GET", f"/experiment/{_check_uid(uid)}/results", True, params=q).content

    def get_results(self, uid: str, dest: str | Path, sims: Sequence[int] | None = None,
                    columns: Sequence[str] | None = None) -> Path:
        """Download and unpack under ``dest/uid/``; returns that directory."""
        data = self.download_results(uid, sims, columns)
        out = Path(dest) / uid
        out.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            for info in zf.infolist():
                target = (out / info.filename).resolve()
                if out.resolve() not in target.parents:
                    raise ClientError(f"refusing to unpack {info.filename!r} outside {out}")
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(zf.read(info))
        return out

    def abort(self, uid: str) -> str:
        return self._request("POST", f"/experiment/{_check_uid(uid)}/abort", False).json()["state"]

    def health(self) -> dict[str, Any]:
        return self._request("GET", "/service/health", True).json()

    def wait(self, uid: str, timeout: float = 600.0, poll: float = 0.1) -> Completion:
        end = time.monotonic() + timeout
        while True:
            c = self.check_completion(uid)
            if c.terminal or time.monotonic() >= end:
                return c
            time.sleep(poll)

    def close(self) -> None:
        self.http.close()
