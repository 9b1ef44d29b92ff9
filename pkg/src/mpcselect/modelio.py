"""Binary containers for models, proxies, MLPs, and datasets.

Model container ("SFMT"):
    magic   4 bytes  b"SFMT"
    version 1 byte   (currently 1)
    kind    1 byte   0 = transformer, 1 = proxy, 2 = mlp
    config  u32 length + UTF-8 JSON (sorted keys; scalar metadata only)
    tensors u32 count, then per tensor:
            u8 name length, name bytes, u8 ndim, u32 dims..., float64 data

Dataset container ("SFDT"):
    magic   4 bytes  b"SFDT"
    version 1 byte
    mode    1 byte   0 = pre-embedded rows, 1 = integer token ids
    n, T, D u32 each (D = 0 in token mode)
    valid   u32 * n  per-row valid lengths (the pad mask derives from these)
    rows    float64 n*T*D (mode 0) or u32 n*T (mode 1)

All words are little-endian; float tensors are 8-byte words, matching the
wire encoding of ring elements.
"""

import json
import struct

import numpy as np

from . import nn
from .approx import MlpApprox
from .proxy import ProxyLayer, ProxyModel, ProxySpec

MODEL_MAGIC = b"SFMT"
DATA_MAGIC = b"SFDT"
VERSION = 1
KIND_TRANSFORMER, KIND_PROXY, KIND_MLP = 0, 1, 2


class FormatError(ValueError):
    """Bad magic, version, or structure in a container file."""


def _write_tensors(out, tensors: dict):
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode()
        if len(nb) > 255 or arr.ndim > 255:
            raise FormatError(f"tensor {name!r} does not fit the header")
        out.append(struct.pack("<B", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8").tobytes())


def _read_tensors(buf, pos):
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        tensors[name] = arr.astype(np.float64)
    return tensors, pos


def _pack(kind: int, config: dict, tensors: dict) -> bytes:
    out = [MODEL_MAGIC, struct.pack("<BB", VERSION, kind)]
    blob = json.dumps(config, sort_keys=True).encode()
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    _write_tensors(out, tensors)
    return b"".join(out)


def _unpack(buf: bytes):
    if buf[:4] != MODEL_MAGIC:
        raise FormatError("not a model container (bad magic)")
    version, kind = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    (clen,) = struct.unpack_from("<I", buf, 6)
    config = json.loads(buf[10 : 10 + clen].decode())
    tensors, _ = _read_tensors(buf, 10 + clen)
    return kind, config, tensors


# -- transformer models -------------------------------------------------------

_LAYER_FIELDS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln_gamma", "ln_beta")
_FFN_FIELDS = ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln2_gamma", "ln2_beta")


def save_model(path, config: nn.TransformerConfig, weights: nn.TransformerWeights):
    cfg = {
        "layers": config.layers,
        "heads": config.heads,
        "dim": config.dim,
        "seq_len": config.seq_len,
        "classes": config.classes,
        "mask_value": config.mask_value,
        "ffn_dim": config.ffn_dim,
        "vocab": config.vocab,
        "eps": config.eps,
    }
    tensors = {}
    for li, lw in enumerate(weights.layers):
        for f in _LAYER_FIELDS:
            tensors[f"layer{li}.{f}"] = getattr(lw, f)
        if lw.ffn_w1 is not None:
            for f in _FFN_FIELDS:
                tensors[f"layer{li}.{f}"] = getattr(lw, f)
    tensors["classifier_w"] = weights.classifier_w
    tensors["classifier_b"] = weights.classifier_b
    if weights.embedding is not None:
        tensors["embedding"] = weights.embedding
    with open(path, "wb") as f:
        f.write(_pack(KIND_TRANSFORMER, cfg, tensors))


def load_model(path):
    with open(path, "rb") as f:
        kind, cfg, tensors = _unpack(f.read())
    if kind != KIND_TRANSFORMER:
        raise FormatError("container does not hold a transformer model")
    config = nn.TransformerConfig(
        layers=cfg["layers"], heads=cfg["heads"], dim=cfg["dim"],
        seq_len=cfg["seq_len"], classes=cfg["classes"], mask_value=cfg["mask_value"],
        ffn_dim=cfg["ffn_dim"], vocab=cfg["vocab"], eps=cfg["eps"],
    )
    layers = []
    for li in range(config.layers):
        kw = {f: tensors[f"layer{li}.{f}"].copy() for f in _LAYER_FIELDS}
        for f in _FFN_FIELDS:
            key = f"layer{li}.{f}"
            if key in tensors:
                kw[f] = tensors[key].copy()
        layers.append(nn.LayerWeights(**kw))
    weights = nn.TransformerWeights(
        layers=layers,
        classifier_w=tensors["classifier_w"].copy(),
        classifier_b=tensors["classifier_b"].copy(),
        embedding=tensors.get("embedding", None),
    )
    if weights.embedding is not None:
        weights.embedding = weights.embedding.copy()
    return config, weights


# -- MLPs ----------------------------------------------------------------------


def save_mlp(path, mlp: MlpApprox):
    cfg = {"site": mlp.site, "hidden": mlp.hidden}
    tensors = {"w1": mlp.w1, "b1": mlp.b1, "w2": mlp.w2, "b2": mlp.b2}
    with open(path, "wb") as f:
        f.write(_pack(KIND_MLP, cfg, tensors))


def load_mlp(path) -> MlpApprox:
    with open(path, "rb") as f:
        kind, cfg, t = _unpack(f.read())
    if kind != KIND_MLP:
        raise FormatError("container does not hold an MLP")
    return MlpApprox(cfg["site"], t["w1"].copy(), t["b1"].copy(), t["w2"].copy(), t["b2"].copy())


# -- proxies --------------------------------------------------------------------

_PROXY_FIELDS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln_gamma", "ln_beta")


def save_proxy(path, proxy: ProxyModel):
    cfg = {
        "spec": [proxy.spec.layers, proxy.spec.heads, proxy.spec.hidden],
        "dim": proxy.dim,
        "head_dim": proxy.head_dim,
        "seq_len": proxy.seq_len,
        "classes": proxy.classes,
        "mask_value": proxy.mask_value,
        "eps": proxy.eps,
        "kept_heads": [list(pl.kept_heads) for pl in proxy.layers],
    }
    tensors = {}
    for li, pl in enumerate(proxy.layers):
        for f in _PROXY_FIELDS:
            tensors[f"layer{li}.{f}"] = getattr(pl, f)
        for prefix, mlp in (("softmax_mlp", pl.softmax_mlp), ("ln_mlp", pl.ln_mlp)):
            if mlp is not None:
                for f in ("w1", "b1", "w2", "b2"):
                    tensors[f"layer{li}.{prefix}.{f}"] = getattr(mlp, f)
    tensors["classifier_w"] = proxy.classifier_w
    tensors["classifier_b"] = proxy.classifier_b
    if proxy.entropy_mlp is not None:
        for f in ("w1", "b1", "w2", "b2"):
            tensors[f"entropy_mlp.{f}"] = getattr(proxy.entropy_mlp, f)
    with open(path, "wb") as f:
        f.write(_pack(KIND_PROXY, cfg, tensors))


def load_proxy(path) -> ProxyModel:
    with open(path, "rb") as f:
        kind, cfg, t = _unpack(f.read())
    if kind != KIND_PROXY:
        raise FormatError("container does not hold a proxy model")
    spec = ProxySpec(*cfg["spec"])

    def mlp_at(prefix, site):
        key = f"{prefix}.w1"
        if key not in t:
            return None
        return MlpApprox(
            site,
            t[f"{prefix}.w1"].copy(), t[f"{prefix}.b1"].copy(),
            t[f"{prefix}.w2"].copy(), t[f"{prefix}.b2"].copy(),
        )

    layers = []
    for li in range(spec.layers):
        kw = {f: t[f"layer{li}.{f}"].copy() for f in _PROXY_FIELDS}
        layers.append(
            ProxyLayer(
                **kw,
                kept_heads=tuple(cfg["kept_heads"][li]),
                softmax_mlp=mlp_at(f"layer{li}.softmax_mlp", nn.SITE_ATTN_SOFTMAX),
                ln_mlp=mlp_at(f"layer{li}.ln_mlp", nn.SITE_LN_RECIP),
            )
        )
    return ProxyModel(
        spec=spec,
        dim=cfg["dim"],
        head_dim=cfg["head_dim"],
        seq_len=cfg["seq_len"],
        classes=cfg["classes"],
        mask_value=cfg["mask_value"],
        eps=cfg["eps"],
        layers=layers,
        classifier_w=t["classifier_w"].copy(),
        classifier_b=t["classifier_b"].copy(),
        entropy_mlp=mlp_at("entropy_mlp", nn.SITE_SOFTMAX_ENTROPY),
    )


# -- datasets --------------------------------------------------------------------


def save_dataset(path, rows: np.ndarray, valid_lens: np.ndarray, token_mode: bool = False):
    rows = np.asarray(rows)
    valid_lens = np.asarray(valid_lens, dtype=np.uint32)
    if token_mode:
        if rows.ndim != 2:
            raise FormatError("token datasets are [n, T]")
        n, t = rows.shape
        d = 0
        body = rows.astype("<u4").tobytes()
    else:
        if rows.ndim != 3:
            raise FormatError("embedded datasets are [n, T, D]")
        n, t, d = rows.shape
        body = rows.astype("<f8").tobytes()
    if len(valid_lens) != n:
        raise FormatError("one valid length per row required")
    head = DATA_MAGIC + struct.pack("<BBIII", VERSION, int(token_mode), n, t, d)
    with open(path, "wb") as f:
        f.write(head)
        f.write(valid_lens.astype("<u4").tobytes())
        f.write(body)


def load_dataset(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != DATA_MAGIC:
        raise FormatError("not a dataset container (bad magic)")
    version, mode, n, t, d = struct.unpack_from("<BBIII", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    pos = 4 + struct.calcsize("<BBIII")
    valid = np.frombuffer(buf, dtype="<u4", count=n, offset=pos).astype(np.int64)
    pos += 4 * n
    if mode:
        rows = np.frombuffer(buf, dtype="<u4", count=n * t, offset=pos).reshape(n, t)
        rows = rows.astype(np.int64)
    else:
        rows = np.frombuffer(buf, dtype="<f8", count=n * t * d, offset=pos)
        rows = rows.reshape(n, t, d).astype(np.float64)
    return rows, valid, bool(mode)
