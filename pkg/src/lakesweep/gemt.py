"""Experiment toolchain: group simulations into jobs, pack them, run them, collate.

Job archives are ZIP containers (per-entry DEFLATE, trailing central
directory). Identical input payloads shared by several members of a job
are stored once under ``blobs/<sha256>`` and fanned out again on unpack.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import shutil
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

from . import __version__
from .domain import JobBundle, SimulationSpec, job_id as make_job_id
from .errors import InputError, PackagingError, ParseError
from .model import OUTPUT_FILE, OutputTable, extract_features, run_directory
from .sweep import parse_key_values

log = logging.getLogger(__name__)

MANIFEST = "manifest.meta"
SUMMARY = "summary.meta"
STATUS = "status"
TOOLCHAIN = f"lakesweep-gemt/{__version__}"
_EPOCH = (1980, 1, 1, 0, 0, 0)

Runner = Callable[[Path], object]


@dataclass(frozen=True)
class GemtConfig:
    group_size: int = 10
    compress: bool = True
    pipeline_packaging: bool = True
    feature_filter: tuple[str, ...] | None = None
    max_archive_bytes: int = 512 * 1024 * 1024

    def __post_init__(self) -> None:
        if not isinstance(self.group_size, int) or self.group_size < 1:
            raise ValueError(f"group_size must be an integer >= 1, got {self.group_size!r}")

    @classmethod
    def from_text(cls, text: str) -> "GemtConfig":
        kv = parse_key_values(text)
        args: dict = {}
        if "group_size" in kv:
            args["group_size"] = int(kv["group_size"])
        for flag in ("compress", "pipeline_packaging"):
            if flag in kv:
                args[flag] = _truthy(kv[flag])
        if kv.get("feature_filter"):
            args["feature_filter"] = tuple(c.strip() for c in kv["feature_filter"].split(",") if c.strip())
        if "max_archive_bytes" in kv:
            args["max_archive_bytes"] = int(kv["max_archive_bytes"])
        return cls(**args)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "GemtConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = [
            f"group_size={self.group_size}",
            f"compress={str(self.compress).lower()}",
            f"pipeline_packaging={str(self.pipeline_packaging).lower()}",
            f"max_archive_bytes={self.max_archive_bytes}",
        ]
        if self.feature_filter:
            lines.append("feature_filter=" + ",".join(self.feature_filter))
        return "\n".join(lines) + "\n"


def _truthy(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ManifestEntry:
    sim_id: int
    directory: str
    files: Mapping[str, str]  # file name -> blob digest
    expected_outputs: tuple[str, ...] = (OUTPUT_FILE,)
    provenance: object = "verbatim"


@dataclass(frozen=True)
class JobManifest:
    job_id: str
    entries: tuple[ManifestEntry, ...]
    toolchain: str = TOOLCHAIN

    @property
    def sim_ids(self) -> list[int]:
        return [e.sim_id for e in self.entries]

    def to_text(self) -> str:
        doc = {
            "job_id": self.job_id,
            "toolchain": self.toolchain,
            "entries": [
                {
                    "sim_id": e.sim_id,
                    "directory": e.directory,
                    "files": dict(sorted(e.files.items())),
                    "expected_outputs": list(e.expected_outputs),
                    "provenance": e.provenance,
                }
                for e in self.entries
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "JobManifest":
        doc = json.loads(text)
        entries = []
        for e in doc["entries"]:
            entry = ManifestEntry(
                sim_id=int(e["sim_id"]),
                directory=e["directory"],
                files=dict(e["files"]),
                expected_outputs=tuple(e.get("expected_outputs", (OUTPUT_FILE,))),
                provenance=e.get("provenance", "verbatim"),
            )
            _check_relative(entry.directory)
            for name in entry.files:
                _check_relative(name)
            entries.append(entry)
        return cls(doc["job_id"], tuple(entries), doc.get("toolchain", TOOLCHAIN))


def _check_relative(path: str) -> None:
    parts = path.replace("\\", "/").split("/")
    if path.startswith("/") or ".." in parts or not path:
        raise PackagingError(f"unsafe path in manifest: {path!r}")


# -- zip helpers ------------------------------------------------------------


def _zinfo(name: str, compress: bool) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED if compress else zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def write_zip(entries: Iterable[tuple[str, bytes]], compress: bool = True) -> bytes:
    """Deterministic archive: fixed timestamps, entries in the given order."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, data in entries:
            zf.writestr(_zinfo(name, compress), data)
    return buf.getvalue()


def read_zip(data: bytes) -> dict[str, bytes]:
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            return {info.filename: zf.read(info) for info in zf.infolist() if not info.is_dir()}
    except (zipfile.BadZipFile, zipfile.LargeZipFile, EOFError, KeyError, ValueError, OSError) as exc:
        raise PackagingError(f"corrupt archive: {exc}") from None


# -- phase 1: grouping and packaging ---------------------------------------


def package(members: Sequence[SimulationSpec], cfg: GemtConfig, job_id: str = "job") -> bytes:
    if not members:
        raise PackagingError("cannot package an empty job")
    blobs: dict[str, bytes] = {}
    entries = []
    logical = 0
    for sim in members:
        files = {}
        for name, payload in sorted(sim.input_files.items()):
            digest = hashlib.sha256(payload).hexdigest()
            blobs.setdefault(digest, payload)
            files[name] = digest
            logical += len(payload)
        entries.append(
            ManifestEntry(sim.sim_id, f"sims/{sim.sim_id}", files, (OUTPUT_FILE,), sim.provenance)
        )
    stored = sum(len(b) for b in blobs.values())
    if stored > cfg.max_archive_bytes:
        raise PackagingError(
            f"job {job_id}: {stored} bytes of input exceeds the {cfg.max_archive_bytes} byte limit"
        )
    manifest = JobManifest(job_id, tuple(entries))
    items = [(MANIFEST, manifest.to_text().encode())]
    items += [(f"blobs/{d}", blobs[d]) for d in sorted(blobs)]
    log.debug("packaged %s: %d sims, %d logical bytes, %d stored", job_id, len(members), logical, stored)
    return write_zip(items, compress=cfg.compress)


def unpack(archive: bytes) -> tuple[JobManifest, dict[int, dict[str, bytes]]]:
    contents = read_zip(archive)
    if MANIFEST not in contents:
        raise PackagingError("archive has no manifest")
    try:
        manifest = JobManifest.from_text(contents[MANIFEST].decode("utf-8"))
    except (ValueError, KeyError, TypeError) as exc:
        raise PackagingError(f"bad manifest: {exc}") from None
    sims = {}
    for e in manifest.entries:
        files = {}
        for name, digest in e.files.items():
            blob = contents.get(f"blobs/{digest}")
            if blob is None:
                raise PackagingError(f"missing blob {digest} for sim {e.sim_id}")
            if hashlib.sha256(blob).hexdigest() != digest:
                raise PackagingError(f"blob {digest} fails its checksum")
            files[name] = blob
        sims[e.sim_id] = files
    return manifest, sims


def iter_group(
    sims: Iterable[SimulationSpec], cfg: GemtConfig, uid: str = "0" * 40, start_ordinal: int = 0
) -> Iterator[JobBundle]:
    """Yield bundles of up to ``cfg.group_size`` sims as soon as each fills."""
    pending: list[SimulationSpec] = []
    ordinal = start_ordinal
    for sim in sims:
        pending.append(sim)
        if len(pending) == cfg.group_size:
            yield _bundle(uid, ordinal, pending, cfg)
            ordinal += 1
            pending = []
    if pending:
        yield _bundle(uid, ordinal, pending, cfg)


def _bundle(uid: str, ordinal: int, members: list[SimulationSpec], cfg: GemtConfig) -> JobBundle:
    jid = make_job_id(uid, ordinal)
    return JobBundle(jid, tuple(s.sim_id for s in members), package(members, cfg, jid))


def group(sims: Sequence[SimulationSpec], cfg: GemtConfig, uid: str = "0" * 40) -> list[JobBundle]:
    if not sims:
        raise ValueError("no simulations to group")
    return list(iter_group(sims, cfg, uid))


# -- phase 2: running a job on a worker ------------------------------------


@dataclass
class SimOutcome:
    ok: bool
    reason: str = ""
    outputs: dict[str, bytes] = field(default_factory=dict)

    def status_text(self) -> str:
        return "ok\n" if self.ok else f"failed: {self.reason}\n"


@dataclass
class JobResult:
    job_id: str
    ok: bool
    reason: str = ""
    sims: dict[int, SimOutcome] = field(default_factory=dict)

    def to_archive(self) -> bytes:
        items = [(STATUS, (b"ok\n" if self.ok else f"failed: {self.reason}\n".encode()))]
        items.append(("job.meta", json.dumps({"job_id": self.job_id}).encode()))
        for sim_id in sorted(self.sims):
            out = self.sims[sim_id]
            for name in sorted(out.outputs):
                items.append((f"{sim_id}/{name}", out.outputs[name]))
            items.append((f"{sim_id}/{STATUS}", out.status_text().encode()))
        return write_zip(items)

    @classmethod
    def from_archive(cls, data: bytes) -> "JobResult":
        contents = read_zip(data)
        try:
            meta = json.loads(contents["job.meta"])
            top = contents[STATUS].decode()
        except (KeyError, ValueError) as exc:
            raise PackagingError(f"bad result archive: {exc}") from None
        ok, reason = _parse_status(top)
        sims: dict[int, SimOutcome] = {}
        for name, payload in contents.items():
            head, _, tail = name.partition("/")
            if not tail or not head.isdigit():
                continue
            sim = sims.setdefault(int(head), SimOutcome(False, "no status"))
            if tail == STATUS:
                sim.ok, sim.reason = _parse_status(payload.decode())
            else:
                sim.outputs[tail] = payload
        return cls(meta["job_id"], ok, reason, sims)


def _parse_status(text: str) -> tuple[bool, str]:
    text = text.strip()
    if text == "ok":
        return True, ""
    return False, text.removeprefix("failed:").strip() or "failed"


def run_job(
    archive: bytes,
    runner: Runner = run_directory,
    scratch_root: str | os.PathLike | None = None,
    cleanup: bool = True,
) -> JobResult:
    """Run every member of a job archive; one failure never stops its siblings."""
    try:
        manifest, sims = unpack(archive)
    except PackagingError as exc:
        return JobResult(job_id="unknown", ok=False, reason=str(exc))
    if scratch_root is None:
        import tempfile

        scratch_root = tempfile.mkdtemp(prefix="lakesweep-scratch-")
    job_dir = Path(scratch_root) / manifest.job_id
    if job_dir.exists():
        shutil.rmtree(job_dir)
    result = JobResult(manifest.job_id, ok=True)
    try:
        for entry in manifest.entries:
            sim_dir = job_dir / str(entry.sim_id)
            sim_dir.mkdir(parents=True)
            for name, payload in sims[entry.sim_id].items():
                (sim_dir / name).write_bytes(payload)
            try:
                runner(sim_dir)
                outputs = {}
                for name in entry.expected_outputs:
                    p = sim_dir / name
                    if not p.is_file():
                        raise InputError(f"expected output {name} was not produced")
                    outputs[name] = p.read_bytes()
                result.sims[entry.sim_id] = SimOutcome(True, outputs=outputs)
            except Exception as exc:  # noqa: BLE001 - any model failure is per-sim
                log.info("sim %s of %s failed: %s", entry.sim_id, manifest.job_id, exc)
                result.sims[entry.sim_id] = SimOutcome(False, _one_line(exc))
    finally:
        if cleanup:
            shutil.rmtree(job_dir, ignore_errors=True)
    return result


def _one_line(exc: Exception) -> str:
    msg = str(exc).replace("\n", " ").strip()
    return f"{type(exc).__name__}: {msg}" if msg else type(exc).__name__


# -- phase 3: collation -------------------------------------------------------


@dataclass
class CollatedResults:
    uid: str
    outputs: dict[int, dict[str, bytes]]
    failed_sims: list[tuple[int, str]]

    @property
    def summary(self) -> dict[str, int]:
        return {
            "sims_total": len(self.outputs) + len(self.failed_sims),
            "sims_ok": len(self.outputs),
            "sims_failed": len(self.failed_sims),
        }

    def to_archive(self) -> bytes:
        return collated_archive(self.outputs, dict(self.failed_sims), self.summary)


def collated_archive(
    outputs: Mapping[int, Mapping[str, bytes]],
    failed: Mapping[int, str],
    summary: Mapping[str, object],
) -> bytes:
    items = []
    for sim_id in sorted(set(outputs) | set(failed)):
        if sim_id in outputs:
            for name in sorted(outputs[sim_id]):
                items.append((f"{sim_id}/{name}", outputs[sim_id][name]))
            items.append((f"{sim_id}/{STATUS}", b"ok\n"))
        else:
            items.append((f"{sim_id}/{STATUS}", f"failed: {failed[sim_id]}\n".encode()))
    items.append((SUMMARY, json.dumps(dict(summary), sort_keys=True).encode()))
    return write_zip(items)


def _filter_outputs(files: Mapping[str, bytes], columns: Sequence[str]) -> dict[str, bytes]:
    out = dict(files)
    if OUTPUT_FILE in out:
        table = OutputTable.from_csv(out[OUTPUT_FILE])
        out[OUTPUT_FILE] = extract_features(table, columns).to_csv()
    return out


def collate(
    uid: str,
    jobs: Mapping[str, Sequence[int]],
    archives: Mapping[str, bytes | None],
    cfg: GemtConfig = GemtConfig(),
) -> CollatedResults:
    """Merge per-job result archives.

    ``jobs`` maps every job id of the experiment to its sim ids; a job with
    no archive has all of its sims reported as ``lost``.
    """
    outputs: dict[int, dict[str, bytes]] = {}
    failed: dict[int, str] = {}
    for jid in sorted(jobs):
        sim_ids = jobs[jid]
        data = archives.get(jid)
        if data is None:
            for s in sim_ids:
                failed[s] = "lost"
            continue
        try:
            res = JobResult.from_archive(data)
        except PackagingError as exc:
            for s in sim_ids:
                failed[s] = f"unreadable result: {exc}"
            continue
        for s in sim_ids:
            if s in outputs or s in failed:
                continue  # first result wins
            if not res.ok:
                failed[s] = res.reason or "job failed"
                continue
            sim = res.sims.get(s)
            if sim is None:
                failed[s] = "missing from result"
            elif not sim.ok:
                failed[s] = sim.reason
            else:
                files = sim.outputs
                if cfg.feature_filter:
                    try:
                        files = _filter_outputs(files, cfg.feature_filter)
                    except (InputError, ValueError) as exc:
                        failed[s] = f"feature extraction: {exc}"
                        continue
                outputs[s] = files
    return CollatedResults(uid, outputs, sorted(failed.items()))


def subset_archive(
    collated: bytes, sims: Sequence[int] | None = None, columns: Sequence[str] | None = None
) -> bytes:
    """Cut a collated archive down to some sims and/or output columns."""
    contents = read_zip(collated)
    outputs: dict[int, dict[str, bytes]] = {}
    failed: dict[int, str] = {}
    per_sim: dict[int, dict[str, bytes]] = {}
    for name, payload in contents.items():
        head, _, tail = name.partition("/")
        if tail and head.isdigit():
            per_sim.setdefault(int(head), {})[tail] = payload
    wanted = set(per_sim) if sims is None else set(sims)
    unknown = wanted - set(per_sim)
    if unknown:
        raise InputError(f"unknown sim ids {sorted(unknown)[:10]}")
    for sim_id in wanted:
        files = dict(per_sim[sim_id])
        ok, reason = _parse_status(files.pop(STATUS, b"failed: no status").decode())
        if not ok:
            failed[sim_id] = reason
            continue
        outputs[sim_id] = _filter_outputs(files, columns) if columns else files
    summary = {
        "sims_total": len(outputs) + len(failed),
        "sims_ok": len(outputs),
        "sims_failed": len(failed),
    }
    if columns:
        summary["columns"] = ",".join(columns)
    return collated_archive(outputs, failed, summary)


def read_collated(data: bytes) -> tuple[dict[int, dict[str, bytes]], dict[int, str], dict]:
    contents = read_zip(data)
    summary = json.loads(contents.pop(SUMMARY, b"{}"))
    outputs: dict[int, dict[str, bytes]] = {}
    failed: dict[int, str] = {}
    for name, payload in contents.items():
        head, _, tail = name.partition("/")
        if not (tail and head.isdigit()):
            continue
        sim_id = int(head)
        if tail == STATUS:
            ok, reason = _parse_status(payload.decode())
            if not ok:
                failed[sim_id] = reason
        else:
            outputs.setdefault(sim_id, {})[tail] = payload
    return outputs, failed, summary


def load_simulations(files: Mapping[str, bytes]) -> list[SimulationSpec]:
    """Turn ``<simdir>/<file>`` archive entries into SimulationSpecs.

    Sim directories are sorted by name; sim ids follow that order.
    """
    by_dir: dict[str, dict[str, bytes]] = {}
    for name, payload in files.items():
        parts = [p for p in name.replace("\\", "/").split("/") if p]
        if len(parts) < 2:
            raise ParseError("input files must live in a simulation sub-directory", name)
        by_dir.setdefault("/".join(parts[:-1]), {})[parts[-1]] = payload
    if not by_dir:
        raise ParseError("upload contains no simulation directories", "upload")
    sims = []
    for i, d in enumerate(sorted(by_dir)):
        sims.append(SimulationSpec(i, by_dir[d], provenance={"source": d}))
    return sims
