"""Binary dataset/checkpoint container, splitting, and config parsing.

Container format (`.dwb`): a 64-byte little-endian header followed by a raw
payload. Header layout (struct ``<4sHB4IQ`` then zero padding):

    magic     4 bytes  b"DLWB"
    version   u16      1
    dtype     u8       0=float32 1=float64 (datasets); per-record for checkpoints
    n_samples u32      sample count (datasets) / record count (checkpoints)
    T, H, W   u32 each sequence length and grid extents (0 for checkpoints)
    seed      u64      generating seed
    padding   zeros up to byte 64

Dataset payload: sample-major [n][T][H][W] row-major values. Checkpoint
payload: a series of named records (u16 name length, UTF-8 name, u8 dtype
code, u8 ndim, ndim u32 extents, raw values).
"""

import configparser
import dataclasses
import io
import struct

import numpy as np

MAGIC = b"DLWB"
VERSION = 1
_HEADER_FMT = "<4sHB4IQ"
_HEADER_BYTES = 64

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"),
                2: np.dtype("<c8"), 3: np.dtype("<c16")}
_CODES_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}
_DATASET_CODES = (0, 1)


class StorageError(IOError):
    """Base class for container format violations."""


class BadMagicError(StorageError):
    pass


class BadVersionError(StorageError):
    pass


class TruncatedPayloadError(StorageError):
    pass


class DtypeMismatchError(StorageError):
    pass


class ConfigError(ValueError):
    """Base class for experiment-config violations."""


class UnknownKeyError(ConfigError):
    pass


class MissingKeyError(ConfigError):
    pass


class ConfigTypeError(ConfigError):
    pass


@dataclasses.dataclass(frozen=True)
class DatasetHeader:
    dtype_code: int
    n_samples: int
    T: int
    H: int
    W: int
    seed: int

    @property
    def dtype(self):
        return _DTYPE_CODES[self.dtype_code]

    @property
    def payload_bytes(self):
        return self.n_samples * self.T * self.H * self.W * self.dtype.itemsize


@dataclasses.dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_val: int
    n_test: int

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("SplitSpec: counts must be non-negative")


def _pack_header(header):
    raw = struct.pack(_HEADER_FMT, MAGIC, VERSION, header.dtype_code,
                      header.n_samples, header.T, header.H, header.W, header.seed)
    return raw + b"\x00" * (_HEADER_BYTES - len(raw))


def _unpack_header(raw):
    if len(raw) < _HEADER_BYTES:
        raise TruncatedPayloadError(f"file shorter than the {_HEADER_BYTES}-byte header")
    magic, version, dtype_code, n, t, h, w, seed = struct.unpack_from(_HEADER_FMT, raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}, expected {VERSION}")
    if dtype_code not in _DTYPE_CODES:
        raise DtypeMismatchError(f"unknown dtype code {dtype_code}")
    return DatasetHeader(dtype_code, n, t, h, w, seed)


def write_dataset(path, data, seed=0):
    """Write [n,T,H,W] float32/float64 sequences as a `.dwb` dataset."""
    data = np.ascontiguousarray(data)
    if data.ndim != 4:
        raise ValueError(f"write_dataset: expected [n,T,H,W], got shape {data.shape}")
    le = data.dtype.newbyteorder("<")
    if le not in _CODES_DTYPE or _CODES_DTYPE[le] not in _DATASET_CODES:
        raise DtypeMismatchError(f"datasets must be float32/float64, got {data.dtype}")
    header = DatasetHeader(_CODES_DTYPE[le], *data.shape, int(seed))
    with open(path, "wb") as fh:
        fh.write(_pack_header(header))
        fh.write(data.astype(le, copy=False).tobytes())
    return header


class LazyDataset:
    """Read-only, memory-mapped sample access into a `.dwb` dataset."""

    def __init__(self, path, header):
        self.path = path
        self.header = header
        self._mm = np.memmap(path, dtype=header.dtype, mode="r",
                             offset=_HEADER_BYTES,
                             shape=(header.n_samples, header.T, header.H, header.W))

    def __len__(self):
        return self.header.n_samples

    def __getitem__(self, index):
        return np.asarray(self._mm[index])

    def array(self):
        return np.asarray(self._mm)


def read_dataset(path, expect_dtype=None):
    """Open a `.dwb` dataset; samples are read lazily via memory mapping."""
    with open(path, "rb") as fh:
        header = _unpack_header(fh.read(_HEADER_BYTES))
        fh.seek(0, io.SEEK_END)
        actual = fh.tell() - _HEADER_BYTES
    if header.dtype_code not in _DATASET_CODES:
        raise DtypeMismatchError(f"not a dataset file (dtype code {header.dtype_code})")
    if actual != header.payload_bytes:
        raise TruncatedPayloadError(
            f"payload is {actual} bytes, header implies {header.payload_bytes}")
    if expect_dtype is not None and header.dtype != np.dtype(expect_dtype):
        raise DtypeMismatchError(f"dataset is {header.dtype}, expected {expect_dtype}")
    return header, LazyDataset(path, header)


def split(data, spec):
    """Contiguous, deterministic train/val/test views in that order."""
    n = len(data)
    total = spec.n_train + spec.n_val + spec.n_test
    if total > n:
        raise ValueError(f"split: {total} requested from {n} samples")
    a, b = spec.n_train, spec.n_train + spec.n_val
    return data[:a], data[a:b], data[b:total]


def write_checkpoint(path, params, seed=0):
    """Write named arrays (model/optimizer state) into the same container."""
    with open(path, "wb") as fh:
        fh.write(_pack_header(DatasetHeader(0, len(params), 0, 0, 0, int(seed))))
        for name, value in params.items():
            value = np.asarray(value)
            if not value.flags.c_contiguous:
                value = np.ascontiguousarray(value)  # note: would promote 0-d to 1-d
            le = value.dtype.newbyteorder("<")
            if le not in _CODES_DTYPE:
                raise DtypeMismatchError(f"unsupported checkpoint dtype {value.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _CODES_DTYPE[le], value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(value.astype(le, copy=False).tobytes())


def read_checkpoint(path):
    """Read a checkpoint back as an ordered name -> array dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header = _unpack_header(raw)
    out = {}
    offset = _HEADER_BYTES
    try:
        for _ in range(header.n_samples):
            (nlen,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + nlen].decode("utf-8")
            offset += nlen
            code, ndim = struct.unpack_from("<BB", raw, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            dtype = _DTYPE_CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(raw):
                raise TruncatedPayloadError(f"record {name!r} extends past end of file")
            out[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=offset).reshape(shape).copy()
            offset += nbytes
    except struct.error as exc:
        raise TruncatedPayloadError(str(exc)) from exc
    return out


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

_MODEL_FAMILIES = ("fno2d", "tfno2d", "convlstm", "unet", "persistence")

# section -> key -> (type, default); None default means the key is required
_SCHEMA = {
    "simulation": {
        "nu": (float, 1e-3),
        "dt": (float, 1e-2),
        "T": (int, 50),
        "height": (int, 64),
        "width": (int, 64),
        "forcing_amplitude": (float, 0.1),
        "alpha": (float, 2.5),
        "tau": (float, 7.0),
        "seed": (int, 0),
        "n_train": (int, 1000),
        "n_val": (int, 50),
        "n_test": (int, 200),
    },
    "model": {
        "family": (str, None),
        "width": (int, 0),        # 0 = fit to the parameter budget
        "budget": (str, ""),
        "modes": (int, 12),
        "depth": (int, 4),
        "context_frames": (int, 10),
        "lift_dim": (int, 256),
        "tucker_rank": (float, 0.5),
        "seed": (int, 0),
    },
    "training": {
        "lr": (float, 1e-3),
        "batch_size": (int, 4),
        "epochs": (int, 500),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "clip_norm": (float, 0.0),  # 0 disables clipping
        "rollout_steps": (int, 0),  # 0 = full sequence, T - context_frames
        "seed": (int, 0),
    },
    "evaluation": {
        "blowup_factor": (float, 1e3),
        "max_steps": (int, 0),      # 0 = T - context_frames
    },
}


@dataclasses.dataclass
class ExperimentConfig:
    simulation: dict
    model: dict  # None when the config carries no [model] section
    training: dict
    evaluation: dict

    def sim_config(self):
        from .simulate import SimConfig
        s = self.simulation
        return SimConfig(nu=s["nu"], dt_internal=s["dt"], T=s["T"],
                         forcing_amplitude=s["forcing_amplitude"],
                         grid=(s["height"], s["width"]), seed=s["seed"],
                         n_samples=s["n_train"] + s["n_val"] + s["n_test"],
                         alpha=s["alpha"], tau=s["tau"])

    def split_spec(self):
        s = self.simulation
        return SplitSpec(s["n_train"], s["n_val"], s["n_test"])


def _convert(section, key, kind, raw):
    try:
        if kind is int:
            value = int(raw)
        elif kind is float:
            value = float(raw)
        else:
            value = str(raw)
    except ValueError as exc:
        raise ConfigTypeError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from exc
    return value


def parse_config(text):
    """Parse sectioned ``key = value`` text into a validated ExperimentConfig."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), strict=True,
                                       interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (T vs t)
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key: {exc}") from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            raise UnknownKeyError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise UnknownKeyError(f"unknown key {key!r} in [{section}]")

    sections = {}
    for section, keys in _SCHEMA.items():
        if section == "model" and not parser.has_section("model"):
            sections["model"] = None
            continue
        values = {}
        for key, (kind, default) in keys.items():
            if parser.has_section(section) and key in parser[section]:
                values[key] = _convert(section, key, kind, parser[section][key])
            elif default is None:
                raise MissingKeyError(f"[{section}] requires key {key!r}")
            else:
                values[key] = default
        sections[section] = values

    model = sections["model"]
    if model is not None and model["family"] not in _MODEL_FAMILIES:
        raise ConfigTypeError(f"[model] family must be one of {_MODEL_FAMILIES}, "
                              f"got {model['family']!r}")
    cfg = ExperimentConfig(simulation=sections["simulation"], model=model,
                           training=sections["training"], evaluation=sections["evaluation"])
    _validate_physics(cfg)
    return cfg


def _validate_physics(cfg):
    s = cfg.simulation
    if s["nu"] <= 0:
        raise ConfigTypeError("[simulation] nu must be > 0")
    steps = 1.0 / s["dt"]
    if abs(steps - round(steps)) > 1e-9 * steps:
        raise ConfigTypeError("[simulation] dt must divide 1.0 exactly")
    if s["T"] < 2:
        raise ConfigTypeError("[simulation] T must be >= 2")


def _format_value(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg):
    """Canonical text form: every key explicit, schema order, repr floats.

    parse(dump(parse(text))) == parse(text), so dumps are a fixed point.
    """
    lines = []
    for section, keys in _SCHEMA.items():
        values = getattr(cfg, section)
        if values is None:
            continue
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format_value(values[key])}")
        lines.append("")
    return "\n".join(lines)
