"""Upload screening: the gateway accepts data files only."""

from __future__ import annotations

import io
import stat
import zipfile
from typing import Mapping

from ..errors import InputError, PolicyError

DEFAULT_MAX_UPLOAD = 256 * 1024 * 1024
# unpacked size may exceed the upload by this factor before we call it a bomb
EXPANSION_LIMIT = 64

SCRIPT_SUFFIXES = frozenset(
    ".sh .bash .zsh .csh .ksh .fish .py .pyc .pyw .r .rscript .pl .rb .php .js .mjs .lua .tcl"
    " .exe .com .bat .cmd .ps1 .vbs .msi .so .dll .dylib .bin .elf .jar .class .app .run .out".split()
)
# leading bytes of scripts and native executables
MAGICS = (b"#!", b"\x7fELF", b"MZ", b"\xca\xfe\xba\xbe", b"\xcf\xfa\xed\xfe", b"\xce\xfa\xed\xfe",
          b"\xfe\xed\xfa\xce", b"\xfe\xed\xfa\xcf", b"\x00asm")


def _suffix(name: str) -> str:
    base = name.rsplit("/", 1)[-1].lower()
    return "." + base.rsplit(".", 1)[-1] if "." in base else ""


def screen_entry(name: str, payload: bytes, mode: int = 0) -> None:
    """Raise PolicyError if one archive member looks runnable."""
    parts = name.replace("\\", "/").split("/")
    if name.startswith(("/", "\\")) or ".." in parts or (len(name) > 1 and name[1] == ":"):
        raise PolicyError(f"{name}: path escapes the experiment directory")
    if stat.S_ISLNK(mode):
        raise PolicyError(f"{name}: symbolic links are not accepted")
    if mode & 0o111:
        raise PolicyError(f"{name}: executable entries are not accepted")
    if _suffix(name) in SCRIPT_SUFFIXES:
        raise PolicyError(f"{name}: scripts and programs cannot be part of an experiment")
    if payload.startswith(MAGICS):
        raise PolicyError(f"{name}: content looks like a script or executable")


def read_upload(data: bytes, max_bytes: int = DEFAULT_MAX_UPLOAD) -> dict[str, bytes]:
    """Unpack an uploaded ZIP after screening every entry.

    Malformed archives raise InputError; runnable content raises PolicyError.
    Nothing in the upload is ever written out with execute permission or run.
    """
    if len(data) > max_bytes:
        raise InputError(f"upload of {len(data)} bytes exceeds the {max_bytes} byte limit")
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except (zipfile.BadZipFile, ValueError, OSError) as exc:
        raise InputError(f"upload is not a readable ZIP archive: {exc}") from None
    files: dict[str, bytes] = {}
    with zf:
        infos = [i for i in zf.infolist() if not i.is_dir()]
        if sum(i.file_size for i in infos) > max(max_bytes, len(data)) * EXPANSION_LIMIT:
            raise InputError("upload expands beyond the size limit")
        for info in infos:
            mode = info.external_attr >> 16
            screen_entry(info.filename, b"", mode)  # name and mode before reading
            try:
                payload = zf.read(info)
            except (zipfile.BadZipFile, EOFError, OSError, ValueError) as exc:
                raise InputError(f"{info.filename}: corrupt entry: {exc}") from None
            screen_entry(info.filename, payload, mode)
            files[info.filename] = payload
    if not files:
        raise InputError("upload archive is empty")
    return files


def baseline_files(files: Mapping[str, bytes]) -> dict[str, bytes]:
    """Flatten a single-simulation upload (files at top level or in one directory)."""
    dirs = {n.rsplit("/", 1)[0] if "/" in n else "" for n in files}
    if len(dirs) != 1:
        raise InputError(f"baseline must hold one simulation directory, found {len(dirs)}")
    return {n.rsplit("/", 1)[-1]: v for n, v in files.items()}
