"""The three classifier architectures, training, transplant and checkpoints.

A single-modality model is one feature-extraction path (three
Conv-MaxPool-ReLU downsampling blocks, a final conv, a flatten) feeding a
three-Dense-layer head ending in softmax over {normal, abnormal}. The hybrid
model runs two such paths (PCG and ECG), concatenates the flatten outputs and
shares one head. Transfer = copying every pre-flatten path parameter from the
pretrained single-modality models into the hybrid; transplanted tensors stay
trainable.

Parameters live in a flat name -> float32 array dict; path parameters are
``path.<modality>.<layer_index>.<w|b>`` and head parameters ``head.<i>.<w|b>``,
which makes transplant and checkpointing plain dictionary work.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import neuralnet as nn
from .dataset import SplitData, batches
from .evalx import ScoredSample, confusion, gmean
from .seeds import rng_for

CKPT_MAGIC = b"CFCK"
CKPT_VERSION = 1

KIND_PCG = "pcg_only"
KIND_ECG = "ecg_only"
KIND_HYBRID = "hybrid"

CANONICAL_INPUT = (1, 64, 128)

BLOCK_CHANNELS = (16, 32, 64)
FINAL_CONV_CHANNELS = 64
SINGLE_HEAD_WIDTHS = (128, 64, 2)
HYBRID_HEAD_WIDTHS = (256, 64, 2)


class ModelError(RuntimeError):
    """Architecture, transplant, or checkpoint problem."""


@dataclass
class ModelGraph:
    """Ordered layer lists plus a flat named-parameter dict."""

    kind: str
    paths: dict  # modality -> list of layer specs, ends with Flatten
    head: list
    input_shapes: dict  # modality -> (C, H, W)
    params: dict = field(default_factory=dict)

    def clone(self) -> "ModelGraph":
        return ModelGraph(
            kind=self.kind,
            paths={m: list(layers) for m, layers in self.paths.items()},
            head=list(self.head),
            input_shapes=dict(self.input_shapes),
            params={k: v.copy() for k, v in self.params.items()},
        )

    def path_layer_params(self, modality: str):
        layers = self.paths[modality]
        return [self._layer_params(f"path.{modality}.{i}") for i in range(len(layers))]

    def head_layer_params(self):
        return [self._layer_params(f"head.{i}") for i in range(len(self.head))]

    def _layer_params(self, prefix: str) -> dict:
        out = {}
        for key in ("w", "b"):
            name = f"{prefix}.{key}"
            if name in self.params:
                out[key] = self.params[name]
        return out

    def flatten_width(self, modality: str) -> int:
        shapes = nn.chain_shapes(self.paths[modality], self.input_shapes[modality])
        return int(shapes[-1][0])


def _feature_path(dilation: int = 1):
    layers = []
    for ch in BLOCK_CHANNELS:
        layers.append(nn.Conv2d(ch, 3, 3, dilation=dilation, padding="same"))
        layers.append(nn.MaxPool2d(2, 2))
        layers.append(nn.ReLU())
    layers.append(nn.Conv2d(FINAL_CONV_CHANNELS, 3, 3, padding="same"))
    layers.append(nn.Flatten())
    return layers


def _head(widths, dropout: float = 0.0):
    layers = []
    for i, width in enumerate(widths):
        if dropout > 0.0:
            layers.append(nn.Dropout(dropout))
        layers.append(nn.Dense(width))
        if i < len(widths) - 1:
            layers.append(nn.ReLU())
    layers.append(nn.Softmax())
    return layers


def _init_stack(params: dict, prefix: str, layers, in_shape, seed: int):
    shape = tuple(in_shape)
    for i, layer in enumerate(layers):
        tensors = nn.init_params(layer, shape, rng_for(seed, "init", f"{prefix}.{i}"))
        for key, value in tensors.items():
            params[f"{prefix}.{i}.{key}"] = value
        shape = nn.output_shape(layer, shape)
    return shape


def build_single(
    modality: str,
    input_shape=CANONICAL_INPUT,
    seed: int = 0,
    dropout: float = 0.0,
    dilation: int = 1,
) -> ModelGraph:
    """PCG-only or ECG-only classifier for one scalogram image."""
    if modality not in ("pcg", "ecg"):
        raise ValueError(f"modality must be 'pcg' or 'ecg', got {modality!r}")
    if len(input_shape) != 3:
        raise nn.ShapeError(f"input_shape must be (C, H, W), got {input_shape}")
    path = _feature_path(dilation)
    head = _head(SINGLE_HEAD_WIDTHS, dropout)
    model = ModelGraph(
        kind=KIND_PCG if modality == "pcg" else KIND_ECG,
        paths={modality: path},
        head=head,
        input_shapes={modality: tuple(input_shape)},
    )
    flat = _init_stack(model.params, f"path.{modality}", path, input_shape, seed)
    _init_stack(model.params, "head", head, flat, seed)
    return model


def build_hybrid(
    pcg_shape=CANONICAL_INPUT,
    ecg_shape=CANONICAL_INPUT,
    seed: int = 0,
    dropout: float = 0.0,
    dilation: int = 1,
) -> ModelGraph:
    """Dual-path classifier: PCG and ECG features concatenated into one head."""
    paths = {"pcg": _feature_path(dilation), "ecg": _feature_path(dilation)}
    head = _head(HYBRID_HEAD_WIDTHS, dropout)
    model = ModelGraph(
        kind=KIND_HYBRID,
        paths=paths,
        head=head,
        input_shapes={"pcg": tuple(pcg_shape), "ecg": tuple(ecg_shape)},
    )
    concat_width = 0
    for modality in ("pcg", "ecg"):
        flat = _init_stack(
            model.params,
            f"path.{modality}",
            paths[modality],
            model.input_shapes[modality],
            seed,
        )
        concat_width += flat[0]
    _init_stack(model.params, "head", head, (concat_width,), seed)
    return model


def transplant(hybrid: ModelGraph, pcg_model: ModelGraph, ecg_model: ModelGraph) -> ModelGraph:
    """Copy all pre-flatten path weights from the single-modality models.

    Head parameters are untouched and every copied tensor remains trainable.
    Returns a new ModelGraph; the error on geometry mismatch names the first
    incompatible tensor in layer order.
    """
    if hybrid.kind != KIND_HYBRID:
        raise ModelError(f"transplant target must be hybrid, got {hybrid.kind!r}")
    out = hybrid.clone()
    for modality, source in (("pcg", pcg_model), ("ecg", ecg_model)):
        if modality not in source.paths:
            raise ModelError(f"source model has no {modality!r} path")
        n_layers = len(out.paths[modality])
        if len(source.paths[modality]) != n_layers:
            raise ModelError(
                f"path.{modality}: source has {len(source.paths[modality])} layers, "
                f"hybrid has {n_layers}"
            )
        for i in range(n_layers):
            for key in ("w", "b"):
                name = f"path.{modality}.{i}.{key}"
                if (name in out.params) != (name in source.params):
                    raise ModelError(f"geometry mismatch at {name}: tensor missing")
                if name not in out.params:
                    continue
                src, dst = source.params[name], out.params[name]
                if src.shape != dst.shape:
                    raise ModelError(
                        f"geometry mismatch at {name}: source {src.shape} vs "
                        f"hybrid {dst.shape}"
                    )
                out.params[name] = src.copy()
    return out


# ---------------------------------------------------------------------------
# forward / predict


def _check_input(model: ModelGraph, modality: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    expected = model.input_shapes[modality]
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(expected):
        raise nn.ShapeError(
            f"{modality} input must be (batch, {', '.join(map(str, expected))}), "
            f"got shape {x.shape}"
        )
    return x


def _forward_with_logits(model: ModelGraph, inputs: dict, mode: str, rng=None):
    feats = []
    path_caches = {}
    widths = []
    for modality in model.paths:
        if modality not in inputs:
            raise nn.ShapeError(f"missing {modality!r} input for {model.kind} model")
        x = _check_input(model, modality, inputs[modality])
        y, caches = nn.forward_layers(
            model.paths[modality], model.path_layer_params(modality), x, mode=mode, rng=rng
        )
        feats.append(y)
        widths.append(y.shape[1])
        path_caches[modality] = caches
    z = feats[0] if len(feats) == 1 else np.concatenate(feats, axis=1)
    head_layers = model.head[:-1]  # exclude softmax; combined with CE in training
    head_params = model.head_layer_params()[:-1]
    logits, head_caches = nn.forward_layers(head_layers, head_params, z, mode=mode, rng=rng)
    probs = nn.softmax(logits)
    return probs, (path_caches, head_caches, widths)


def _backward_from_logits(model: ModelGraph, caches, grad_logits) -> dict:
    path_caches, head_caches, widths = caches
    grads = {}
    grad_z, head_grads = nn.backward_layers(model.head[:-1], head_caches, grad_logits)
    for i, layer_grads in enumerate(head_grads):
        for key, g in layer_grads.items():
            grads[f"head.{i}.{key}"] = g
    offset = 0
    for modality, width in zip(model.paths, widths):
        grad_feat = grad_z[:, offset : offset + width]
        offset += width
        _, path_grads = nn.backward_layers(
            model.paths[modality], path_caches[modality], grad_feat
        )
        for i, layer_grads in enumerate(path_grads):
            for key, g in layer_grads.items():
                grads[f"path.{modality}.{i}.{key}"] = g
    return grads


def _as_inputs(model: ModelGraph, sample) -> dict:
    if isinstance(sample, dict):
        return sample
    if len(model.paths) != 1:
        raise nn.ShapeError("hybrid predict needs a dict with 'pcg' and 'ecg' arrays")
    (modality,) = model.paths.keys()
    return {modality: sample}


def predict(model: ModelGraph, sample):
    """Abnormal-class probability; scalar for one sample, vector for a batch.

    Accepts a bare array for single-modality models or a modality dict
    (``{"pcg": ..., "ecg": ...}``) for any kind. Dropout runs in infer mode.
    """
    inputs = _as_inputs(model, sample)
    single = all(np.asarray(v).ndim == 3 for v in inputs.values())
    probs, _ = _forward_with_logits(model, inputs, mode="infer")
    scores = probs[:, 1]
    return float(scores[0]) if single else scores


def path_features(model: ModelGraph, modality: str, sample) -> np.ndarray:
    """Flatten-layer output of one feature-extraction path (infer mode)."""
    x = _check_input(model, modality, np.asarray(sample, dtype=np.float32))
    y, _ = nn.forward_layers(
        model.paths[modality], model.path_layer_params(modality), x, mode="infer"
    )
    return y


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 20
    epochs: int = 30
    seed: int = 0
    patience: int = 0  # 0 disables early stopping

    def __post_init__(self):
        if self.epochs < 0 or self.patience < 0 or self.batch_size < 1:
            raise ValueError(f"invalid train config: {self}")


def _val_gmean(model: ModelGraph, val_data: SplitData) -> float:
    scores = predict(model, val_data.inputs)
    scored = [
        ScoredSample(sid, rid, int(lbl), float(s))
        for sid, rid, lbl, s in zip(
            val_data.sample_ids, val_data.record_ids, val_data.labels, scores
        )
    ]
    counts = confusion(scored, 0.5)
    return gmean(counts.sensitivity, counts.specificity)


def train(model: ModelGraph, train_data: SplitData, val_data, config: TrainConfig):
    """ADAM training with per-epoch validation G-mean at threshold 0.5.

    Returns (best-by-val-G-mean model, history); the input model is not
    mutated. With no validation data the final-epoch model is returned.
    Deterministic for a fixed (data, config) pair.
    """
    if len(train_data) == 0:
        raise ModelError("training split is empty")
    work = model.clone()
    if config.epochs == 0:
        return work, []
    state = nn.AdamState.for_params(work.params, lr=config.lr)
    best_params = None
    best_gmean = -1.0
    best_epoch = -1
    history = []
    for epoch in range(config.epochs):
        total_loss = 0.0
        total_n = 0
        for b, (inputs, targets) in enumerate(
            batches(train_data, config.batch_size, config.seed, epoch)
        ):
            rng = rng_for(config.seed, "dropout", epoch, b)
            probs, caches = _forward_with_logits(work, inputs, "train", rng)
            loss, grad_logits = nn.cross_entropy(probs, targets)
            if not math.isfinite(loss):
                raise ModelError(
                    f"non-finite loss {loss} at epoch {epoch} batch {b}; "
                    "check inputs and learning rate"
                )
            grads = _backward_from_logits(work, caches, grad_logits)
            nn.adam_step(work.params, grads, state)
            total_loss += loss * len(targets)
            total_n += len(targets)
        entry = {"epoch": epoch, "train_loss": total_loss / total_n}
        if val_data is not None and len(val_data):
            g = _val_gmean(work, val_data)
            entry["val_gmean"] = g
            if g > best_gmean:
                best_gmean = g
                best_epoch = epoch
                best_params = {k: v.copy() for k, v in work.params.items()}
            elif config.patience and epoch - best_epoch >= config.patience:
                history.append(entry)
                break
        history.append(entry)
    if best_params is not None:
        work.params = best_params
    return work, history


# ---------------------------------------------------------------------------
# checkpoints


def _arch_dict(model: ModelGraph) -> dict:
    return {
        "kind": model.kind,
        "paths": {
            m: [nn.layer_to_dict(layer) for layer in layers]
            for m, layers in model.paths.items()
        },
        "head": [nn.layer_to_dict(layer) for layer in model.head],
        "input_shapes": {m: list(s) for m, s in model.input_shapes.items()},
    }


def save_checkpoint(model: ModelGraph, path) -> None:
    """Write the .cfck format: magic, version, arch JSON, named f32 tensors."""
    # no sort_keys: the paths dict order defines feature concatenation order
    arch = json.dumps(_arch_dict(model), separators=(",", ":")).encode("utf-8")
    names = sorted(model.params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(arch)))
        fh.write(arch)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            tensor = np.ascontiguousarray(model.params[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.tobytes())


def _take(buf: memoryview, offset: int, count: int, path):
    if offset + count > len(buf):
        raise ModelError(f"{path}: truncated checkpoint")
    return buf[offset : offset + count], offset + count


def load_checkpoint(path) -> ModelGraph:
    with open(path, "rb") as fh:
        raw = memoryview(fh.read())
    magic, off = _take(raw, 0, 4, path)
    if bytes(magic) != CKPT_MAGIC:
        raise ModelError(f"{path}: bad magic {bytes(magic)!r}")
    word, off = _take(raw, off, 4, path)
    version = struct.unpack("<I", word)[0]
    if version != CKPT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    word, off = _take(raw, off, 4, path)
    arch_blob, off = _take(raw, off, struct.unpack("<I", word)[0], path)
    arch = json.loads(bytes(arch_blob).decode("utf-8"))
    word, off = _take(raw, off, 4, path)
    n_tensors = struct.unpack("<I", word)[0]
    params = {}
    for _ in range(n_tensors):
        word, off = _take(raw, off, 2, path)
        name_blob, off = _take(raw, off, struct.unpack("<H", word)[0], path)
        name = bytes(name_blob).decode("utf-8")
        word, off = _take(raw, off, 1, path)
        rank = word[0]
        word, off = _take(raw, off, 4 * rank, path)
        dims = struct.unpack(f"<{rank}I", word)
        count = int(np.prod(dims)) if rank else 1
        payload, off = _take(raw, off, 4 * count, path)
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    model = ModelGraph(
        kind=arch["kind"],
        paths={
            m: [nn.layer_from_dict(d) for d in layers]
            for m, layers in arch["paths"].items()
        },
        head=[nn.layer_from_dict(d) for d in arch["head"]],
        input_shapes={m: tuple(s) for m, s in arch["input_shapes"].items()},
        params=params,
    )
    return model
