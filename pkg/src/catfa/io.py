"""Binary tensor container, PGM/PPM images, run configs and checkpoints.

TensorFile record (all integers little-endian)::

    b"CTFA" | u8 version=1 | u8 dtype (0=float32, 1=float64) | u8 ndim<=4
    | ndim x u32 dims | row-major payload

Container: ``u32 count`` followed by ``count`` entries, each ``u16 name
length | UTF-8 name | TensorFile record``.

Checkpoint: ``u32 config length | UTF-8 key=value config text | container``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

MAGIC = b"CTFA"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- tensor files

def write_tensor(f, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; only float32/float64")
    if not 1 <= arr.ndim <= 4:
        raise FormatError(f"rank {arr.ndim} outside 1..4")
    f.write(MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_tensor(f) -> np.ndarray:
    head = f.read(7)
    if len(head) != 7 or head[:4] != MAGIC:
        raise FormatError("bad magic; not a CTFA tensor record")
    version, code, ndim = struct.unpack("<BBB", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _DTYPES or not 1 <= ndim <= 4:
        raise FormatError(f"bad header: dtype code {code}, ndim {ndim}")
    dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    dt = _DTYPES[code]
    n = int(np.prod(dims)) * dt.itemsize
    payload = f.read(n)
    if len(payload) != n:
        raise FormatError(f"truncated payload: expected {n} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def write_container(f, entries: dict) -> None:
    f.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)) + raw)
        write_tensor(f, arr)


def read_container(f) -> dict:
    (count,) = struct.unpack("<I", f.read(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", f.read(2))
        name = f.read(n).decode("utf-8")
        if name in out:
            raise FormatError(f"duplicate entry name {name!r}")
        out[name] = read_tensor(f)
    return out


def save_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


# ---------------------------------------------------------------- PGM / PPM

def write_pgm(path, mask: np.ndarray) -> None:
    """Binary P5 PGM, maxval 255; foreground (nonzero / True) written as 255."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise FormatError(f"PGM needs a 2-d mask, got shape {m.shape}")
    data = np.where(m.astype(bool), 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (m.shape[1], m.shape[0]))
        f.write(data.tobytes())


def _read_netpbm(path):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval > 255:
        raise FormatError(f"{path}: only 8-bit binary PGM (P5) / PPM (P6) supported")
    ch = 1 if magic == b"P5" else 3
    body = raw[pos + 1: pos + 1 + w * h * ch]
    if len(body) != w * h * ch:
        raise FormatError(f"{path}: truncated image data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, ch), maxval


def read_pgm(path) -> np.ndarray:
    img, _ = _read_netpbm(path)
    if img.shape[2] != 1:
        raise FormatError(f"{path}: expected a grayscale P5 image")
    return img[..., 0]


def read_image(path) -> np.ndarray:
    """A 3 x H x W float32 image on the unit scale from PGM/PPM or a TensorFile."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        img, maxval = _read_netpbm(path)
        img = img.astype(np.float32) / maxval
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        return np.ascontiguousarray(img.transpose(2, 0, 1))
    arr = load_tensor(path).astype(np.float32)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise FormatError(f"{path}: expected a 3 x H x W tensor, got {arr.shape}")
    return arr


def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.asarray(image).transpose(1, 2, 0) * 255 + 0.5, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


# ---------------------------------------------------------------- run config

def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


@dataclass
class RunConfig:
    """Plain-text ``key=value`` training/inference configuration.

    ``data_dir`` is either a directory with ``images/`` (PPM/PGM) and
    ``masks/`` (PGM) of matching filenames, or ``synth:N:HW[:task]`` for
    the built-in synthetic generator.
    """

    variant: str = "tiny"
    channels: tuple = ()
    cat_blocks: tuple = ()
    convnext_blocks: tuple = ()
    heads: tuple = ()
    reduction: tuple = ()
    dfcn_padding: str = "zeros"
    epochs: int = 50
    batch: int = 8
    lr: float = 1e-4
    eps_loss: float = 1e-6
    seed: int = 0
    data_dir: str = "synth:200:64"
    out_dir: str = "runs/default"

    _TUPLES = ("channels", "cat_blocks", "convnext_blocks", "heads", "reduction")

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise FormatError(f"line {lineno}: unknown key {key!r}")
            try:
                if key in cls._TUPLES:
                    values[key] = _ints(val)
                elif key in ("epochs", "batch", "seed"):
                    values[key] = int(val)
                elif key in ("lr", "eps_loss"):
                    values[key] = float(val)
                else:
                    values[key] = val
            except ValueError:
                raise FormatError(f"line {lineno}: bad value for {key}: {val!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in self._TUPLES:
                v = ",".join(str(i) for i in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def synth_spec(self):
        """(n, hw, task) when ``data_dir`` names the synthetic generator, else None."""
        if not self.data_dir.startswith("synth:"):
            return None
        parts = self.data_dir.split(":")
        if len(parts) not in (3, 4):
            raise FormatError(f"data_dir must be synth:N:HW[:task], got {self.data_dir!r}")
        return int(parts[1]), int(parts[2]), parts[3] if len(parts) == 4 else "shapes"

    def model_config(self, input_hw=None):
        from .model import ModelConfig

        overrides = {k: getattr(self, k) for k in self._TUPLES if getattr(self, k)}
        overrides["dfcn_padding"] = self.dfcn_padding
        synth = self.synth_spec()
        if input_hw is None and synth is not None:
            input_hw = (synth[1], synth[1])
        if input_hw is not None:
            overrides["input_hw"] = tuple(input_hw)
        if self.variant == "custom":
            return ModelConfig(**overrides)
        return ModelConfig.variant(self.variant, **overrides)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, run_config: RunConfig) -> None:
    buf = io.BytesIO()
    text = run_config.dump().encode("utf-8")
    buf.write(struct.pack("<I", len(text)) + text)
    write_container(buf, model.store.state_arrays())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Rebuild the model recorded in a checkpoint; returns (model, run_config)."""
    from .model import build

    with open(path, "rb") as f:
        (n,) = struct.unpack("<I", f.read(4))
        rc = RunConfig.parse(f.read(n).decode("utf-8"))
        arrays = read_container(f)
    dtype = next(iter(arrays.values())).dtype
    model = build(rc.model_config(), seed=0, dtype=dtype.type)
    model.store.load_state_arrays(arrays)
    return model, rc
