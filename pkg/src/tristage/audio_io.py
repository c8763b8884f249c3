"""WAV file I/O and line-delimited manifests."""

from __future__ import annotations

import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List

import numpy as np
from scipy.io import wavfile

from .dsp import Waveform
from .errors import InvalidArgumentError

log = logging.getLogger(__name__)

_INT_SCALE = {np.dtype("int16"): 32768.0, np.dtype("int32"): 2147483648.0}


def _to_waveform(fs: int, data: np.ndarray, source: str) -> Waveform:
    if data.dtype in _INT_SCALE:
        x = data.astype(np.float64) / _INT_SCALE[data.dtype]
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        log.info("%s: averaging %d channels to mono", source, x.shape[1])
        x = x.mean(axis=1)
    return Waveform(x, fs)


def read_wav(path: str | os.PathLike) -> Waveform:
    fs, data = wavfile.read(path)
    return _to_waveform(fs, data, str(path))


def _encode(wav: Waveform, subtype: str) -> np.ndarray:
    if subtype == "float32":
        return wav.samples.astype(np.float32)
    if subtype == "pcm16":
        return np.round(np.clip(wav.samples, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    raise InvalidArgumentError(f"unknown WAV subtype {subtype!r}")


def write_wav(path: str | os.PathLike, wav: Waveform, subtype: str = "float32") -> None:
    """Write atomically so readers never observe a half-written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    wavfile.write(tmp, wav.fs, _encode(wav, subtype))
    os.replace(tmp, path)


def wav_to_bytes(wav: Waveform, subtype: str = "float32") -> bytes:
    buf = io.BytesIO()
    wavfile.write(buf, wav.fs, _encode(wav, subtype))
    return buf.getvalue()


def wav_from_bytes(blob: bytes) -> Waveform:
    fs, data = wavfile.read(io.BytesIO(blob))
    return _to_waveform(fs, data, "<bytes>")


@dataclass
class ManifestEntry:
    utt_id: str
    path: str
    fs: int
    tags: Dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        rec = {"id": self.utt_id, "path": self.path, "fs": self.fs}
        if self.tags:
            rec["tags"] = self.tags
        return json.dumps(rec, sort_keys=True)


def read_manifest(path: str | os.PathLike) -> List[ManifestEntry]:
    """Parse a JSON-lines manifest; relative audio paths resolve against the manifest's directory."""
    base = Path(path).parent
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
                audio = Path(rec["path"])
                entries.append(
                    ManifestEntry(
                        utt_id=str(rec["id"]),
                        path=str(audio if audio.is_absolute() else base / audio),
                        fs=int(rec["fs"]),
                        tags=dict(rec.get("tags", {})),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise InvalidArgumentError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return entries


def write_manifest(path: str | os.PathLike, entries: Iterable[ManifestEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")
