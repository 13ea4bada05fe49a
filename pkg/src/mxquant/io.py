"""Binary tensor files, transform records, config files, and CSV reports.

Tensor file (.mxbt), little-endian throughout:
    magic   4 bytes  b"MXBT"
    version u16      1
    dtype   u8       0 = f32, 1 = mx4 (e2m1 codes), 2 = mx8 (e4m3 codes)
    rank    u8
    dims    rank * u32
    payload f32: row-major float32
            mx4/mx8: per block (innermost axis, row-major block order):
                scale_exp i8, then codes; mx4 packs two 4-bit codes per
                byte with the first code in the LOW nibble (16 bytes),
                mx8 stores one code per byte (32 bytes)

Transform record (.gpkt):
    magic   4 bytes  b"GPKT"
    version u16      1
    header  5 * u32  N, g, g1, g2, k
    A       g1*g1 float32, row-major
    B       k*g2*g2 float32, row-major (block 0 first)
    optional clip section, 4*k float32: activation alpha_min, activation
    alpha_max, weight alpha_min, weight alpha_max

Config files are flat text, one `key = value` per line; blank lines and
lines starting with # are ignored.
"""

from __future__ import annotations

import glob
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calib import CalibConfig
from .clipping import ClipParams
from .errors import FileFormatError
from .formats import BLOCK, E2M1, E4M3, FormatConfig, MxTensor
from .transform import GpkTransform

TENSOR_MAGIC = b"MXBT"
RECORD_MAGIC = b"GPKT"
VERSION = 1

_DTYPE_TAGS = {"f32": 0, "mx4": 1, "mx8": 2}
_TAG_FORMATS = {1: E2M1, 2: E4M3}


def _pack_nibbles(codes: np.ndarray) -> bytes:
    # two codes per byte, first code in the low nibble
    c = codes.reshape(-1, 2)
    return ((c[:, 0] & 0x0F) | (c[:, 1] << 4)).astype(np.uint8).tobytes()

def _unpack_nibbles(raw: np.ndarray, n: int) -> np.ndarray:
    out = np.empty(n, dtype=np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw >> 4
    return out


def write_tensor(path, tensor) -> None:
    """Write a float array (as f32) or an MxTensor to a .mxbt file."""
    path = Path(path)
    if isinstance(tensor, MxTensor):
        if tensor.fmt.name == "e2m1":
            tag = _DTYPE_TAGS["mx4"]
        elif tensor.fmt.name == "e4m3":
            tag = _DTYPE_TAGS["mx8"]
        else:
            raise FileFormatError(f"no dtype tag for format {tensor.fmt.name}")
        shape = tensor.shape
    else:
        tag = _DTYPE_TAGS["f32"]
        tensor = np.asarray(tensor)
        shape = tensor.shape

    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<HBB", VERSION, tag, len(shape)))
        f.write(struct.pack(f"<{len(shape)}I", *shape))
        if tag == _DTYPE_TAGS["f32"]:
            f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
        else:
            for b in range(tensor.n_blocks):
                f.write(struct.pack("<b", int(tensor.scale_exps[b])))
                if tag == _DTYPE_TAGS["mx4"]:
                    f.write(_pack_nibbles(tensor.codes[b]))
                else:
                    f.write(tensor.codes[b].astype(np.uint8).tobytes())


def read_tensor(path):
    """Read a .mxbt file; returns a float64 array or an MxTensor."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != TENSOR_MAGIC:
        raise FileFormatError(f"{path}: not a tensor file (bad magic)")
    version, tag, rank = struct.unpack_from("<HBB", raw, 4)
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    off = 8
    if len(raw) < off + 4 * rank:
        raise FileFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, off)
    off += 4 * rank
    count = int(np.prod(dims)) if rank else 1

    if tag == _DTYPE_TAGS["f32"]:
        expect = count * 4
        if len(raw) - off != expect:
            raise FileFormatError(f"{path}: payload is {len(raw) - off} bytes, expected {expect}")
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        return data.astype(np.float64).reshape(dims)

    if tag not in _TAG_FORMATS:
        raise FileFormatError(f"{path}: unknown dtype tag {tag}")
    fmt = _TAG_FORMATS[tag]
    if count % BLOCK:
        raise FileFormatError(f"{path}: element count {count} is not a multiple of {BLOCK}")
    n_blocks = count // BLOCK
    code_bytes = BLOCK // 2 if tag == _DTYPE_TAGS["mx4"] else BLOCK
    expect = n_blocks * (1 + code_bytes)
    if len(raw) - off != expect:
        raise FileFormatError(f"{path}: payload is {len(raw) - off} bytes, expected {expect}")

    scale_exps = np.empty(n_blocks, dtype=np.int8)
    codes = np.empty((n_blocks, BLOCK), dtype=np.uint8)
    for b in range(n_blocks):
        scale_exps[b] = struct.unpack_from("<b", raw, off)[0]
        off += 1
        chunk = np.frombuffer(raw, dtype=np.uint8, count=code_bytes, offset=off)
        off += code_bytes
        codes[b] = _unpack_nibbles(chunk, BLOCK) if tag == _DTYPE_TAGS["mx4"] else chunk
    return MxTensor(tuple(dims), fmt, scale_exps, codes)


def write_transform_record(path, t: GpkTransform, act_clip=None, weight_clip=None) -> None:
    if (act_clip is None) != (weight_clip is None):
        raise ValueError("write both clip sections or neither")
    with open(path, "wb") as f:
        f.write(RECORD_MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<5I", t.n, t.g, t.g1, t.g2, t.k))
        f.write(np.ascontiguousarray(t.a, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(t.b, dtype="<f4").tobytes())
        if act_clip is not None:
            for arr in (
                act_clip.alpha_min,
                act_clip.alpha_max,
                weight_clip.alpha_min,
                weight_clip.alpha_max,
            ):
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_transform_record(path):
    """Returns (transform, act_clip | None, weight_clip | None)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 26 or raw[:4] != RECORD_MAGIC:
        raise FileFormatError(f"{path}: not a transform record (bad magic)")
    version = struct.unpack_from("<H", raw, 4)[0]
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    n, g, g1, g2, k = struct.unpack_from("<5I", raw, 6)
    if g1 * g2 != g or k * g != n:
        raise FileFormatError(f"{path}: inconsistent header (N={n}, g={g}, g1={g1}, g2={g2}, k={k})")
    off = 26
    need = (g1 * g1 + k * g2 * g2) * 4
    if len(raw) - off < need:
        raise FileFormatError(f"{path}: truncated factor payload")
    a = np.frombuffer(raw, dtype="<f4", count=g1 * g1, offset=off).astype(np.float64)
    off += g1 * g1 * 4
    b = np.frombuffer(raw, dtype="<f4", count=k * g2 * g2, offset=off).astype(np.float64)
    off += k * g2 * g2 * 4
    t = GpkTransform(a.reshape(g1, g1), b.reshape(k, g2, g2))

    rest = len(raw) - off
    if rest == 0:
        return t, None, None
    if rest != 4 * k * 4:
        raise FileFormatError(f"{path}: clip section is {rest} bytes, expected {4 * k * 4}")
    logits = np.frombuffer(raw, dtype="<f4", count=4 * k, offset=off).astype(np.float64)
    act = ClipParams(logits[:k], logits[k : 2 * k])
    wgt = ClipParams(logits[2 * k : 3 * k], logits[3 * k :])
    return t, act, wgt


# -- flat key=value config files ------------------------------------------


def read_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FileFormatError(f"{path}:{ln}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


@dataclass
class RunConfig:
    """A calibration job parsed from a config file plus CLI overrides."""

    formats: FormatConfig
    calib: CalibConfig
    weights_path: str | None = None
    calib_paths: list[str] = field(default_factory=list)
    out_dir: str | None = None

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        kv = read_kv_file(path)
        if overrides:
            kv.update({k: str(v) for k, v in overrides.items() if v is not None})
        base = Path(path).parent

        def num(key, default, cast):
            return cast(kv[key]) if key in kv else default

        calib = CalibConfig(
            lr=num("lr", 2e-3, float),
            epochs=num("epochs", 5, int),
            batch_size=num("batch_size", 4, int),
            schedule=kv.get("schedule", "cosine"),
            betas=(num("beta1", 0.9, float), num("beta2", 0.999, float)),
            eps=num("eps", 1e-8, float),
            weight_decay=num("weight_decay", 0.0, float),
            seed=num("seed", 0, int),
            g=num("g", 32, int),
            g1=num("g1", 8, int),
            g2=num("g2", 4, int),
            clip_init=num("clip_init", 4.0, float),
        )
        formats = FormatConfig.from_name(kv.get("format", "W4A4KV16"))

        weights = kv.get("weights")
        if weights is not None:
            weights = str((base / weights) if not Path(weights).is_absolute() else Path(weights))
        calib_paths: list[str] = []
        for pat in kv.get("calib", "").replace(",", " ").split():
            full = pat if Path(pat).is_absolute() else str(base / pat)
            hits = sorted(glob.glob(full))
            if not hits:
                raise FileFormatError(f"no calibration files match {pat!r}")
            calib_paths.extend(hits)
        out_dir = kv.get("out")
        if out_dir is not None and not Path(out_dir).is_absolute():
            out_dir = str(base / out_dir)
        return cls(formats, calib, weights, calib_paths, out_dir)


# -- CSV reports -----------------------------------------------------------


def write_loss_csv(path, trace) -> None:
    """Loss trace rows (step, lr, loss); floats as shortest round-trip repr."""
    lines = ["step,lr,loss"]
    lines += [f"{step},{lr!r},{loss!r}" for step, lr, loss in trace]
    Path(path).write_text("\n".join(lines) + "\n")


def write_stats_csv(path, rows, n_bins: int) -> None:
    """Per-block histogram report from cmd_stats."""
    header = ["block", "bimodality_pre", "bimodality_post"]
    header += [f"pre_{i}" for i in range(n_bins)]
    header += [f"post_{i}" for i in range(n_bins)]
    lines = [",".join(header)]
    for r in rows:
        cells = [str(r["block"]), repr(r["bimodality_pre"]), repr(r["bimodality_post"])]
        cells += [str(int(c)) for c in r["pre"]]
        cells += [str(int(c)) for c in r["post"]]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_error_report(path, rows) -> None:
    """Harness comparison rows: (site, mse_before, mse_after)."""
    lines = ["site,mse_before,mse_after"]
    lines += [f"{site},{before!r},{after!r}" for site, before, after in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_block_spec(path):
    """Parse a toy-block spec file into (ToyBlockSpec, FormatConfig, seed)."""
    from .harness import ToyBlockSpec

    kv = read_kv_file(path)
    try:
        spec = ToyBlockSpec(
            hidden=int(kv["hidden"]),
            head_dim=int(kv["head_dim"]),
            n_heads=int(kv["n_heads"]),
            mlp_dim=int(kv["mlp_dim"]),
            template=kv.get("template", "text"),
        )
    except KeyError as e:
        raise FileFormatError(f"{path}: missing block spec key {e.args[0]!r}") from e
    formats = FormatConfig.from_name(kv.get("format", "W4A4KV16"))
    return spec, formats, int(kv.get("seed", 0))
