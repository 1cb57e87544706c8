"""The sequential detector network.

A small convolutional encoder produces a feature grid, positional index
channels are concatenated, and a ConvLSTM with peephole connections
decodes the scene one object per iteration.  Each iteration the hidden
state is pooled to a vector by soft spatial attention and passed through
a classification head (object classes plus background plus an
end-of-sequence class) and a sigmoid-bounded box-offset head.

Training runs a fixed number of iterations; inference stops when the
end-of-sequence class wins the argmax, and drops that prediction plus
any background-classified ones, so the raw output needs no
post-processing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from . import autodiff as ad
from .geometry import BoxXYXY, decode_offsets

CHECKPOINT_MAGIC = "seqdet-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Checkpoint file is malformed or does not match its config."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    num_classes: int = 3
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    decoder_channels: int = 64
    use_attention: bool = True
    use_positional: bool = True
    use_background: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        if self.num_classes < 2:
            raise ValueError("need at least 2 object classes")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd (same padding)")
        if self.image_size % self.downsample != 0 or self.feature_size < 2:
            raise ValueError(
                f"image size {self.image_size} too small for downsample {self.downsample}"
            )

    @property
    def downsample(self) -> int:
        return 2 ** len(self.encoder_channels)

    @property
    def feature_size(self) -> int:
        return self.image_size // self.downsample

    @property
    def num_cls_outputs(self) -> int:
        return self.num_classes + (2 if self.use_background else 1)

    @property
    def eos_index(self) -> int:
        return self.num_cls_outputs - 1

    @property
    def background_index(self) -> Optional[int]:
        return self.num_classes if self.use_background else None

    @property
    def lstm_in_channels(self) -> int:
        return self.encoder_channels[-1] + (2 if self.use_positional else 0)


class DecoderState(NamedTuple):
    h: ad.Tensor
    c: ad.Tensor


@dataclass
class Prediction:
    """One decoder iteration's output."""

    p_cls: ad.Tensor  # softmax probabilities, length num_cls_outputs
    cls_logits: ad.Tensor  # pre-softmax scores (stable NLL path)
    p_loc: ad.Tensor  # sigmoid offsets (x_tl, y_tl, w, h)
    attention: np.ndarray  # (h, w) attention map, detached

    def cls_values(self) -> np.ndarray:
        return self.p_cls.data

    def loc_values(self) -> np.ndarray:
        return self.p_loc.data

    @property
    def argmax_class(self) -> int:
        return int(np.argmax(self.p_cls.data))


class StepOutput(NamedTuple):
    """Detached view of one inference iteration."""

    class_id: int
    probs: np.ndarray
    offsets: np.ndarray
    box: BoxXYXY
    attention: np.ndarray


@dataclass
class InferenceResult:
    detections: list[tuple[int, float, BoxXYXY]]
    attention_maps: list[np.ndarray]
    steps: list[StepOutput]
    stopped_by_eos: bool


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SequentialDetector:
    """Encoder + positional fusion + ConvLSTM decoder + attention + heads."""

    def __init__(self, config: ModelConfig, rng: Union[np.random.Generator, int, None] = 0):
        self.config = config
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(0 if rng is None else rng)
        self.params: dict[str, ad.Tensor] = {}
        self._build(rng)

    def _param(self, name: str, data: np.ndarray) -> ad.Tensor:
        t = ad.Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        k = cfg.kernel_size
        c_in = cfg.in_channels
        for s, c_out in enumerate(cfg.encoder_channels):
            self._param(f"enc.{s}.kernel", _uniform(rng, (k, k, c_in, c_out), k * k * c_in))
            self._param(f"enc.{s}.bias", np.zeros(c_out))
            c_in = c_out

        d = cfg.decoder_channels
        cx = cfg.lstm_in_channels
        fs = cfg.feature_size
        for gate in "ifco":
            self._param(f"lstm.w_x{gate}", _uniform(rng, (k, k, cx, d), k * k * cx))
        for gate in "ifco":
            self._param(f"lstm.w_h{gate}", _uniform(rng, (k, k, d, d), k * k * d))
        for gate in "ifo":  # peepholes act element-wise on the cell state
            self._param(f"lstm.w_c{gate}", np.zeros((fs, fs, d)))
        self._param("lstm.b_i", np.zeros(d))
        self._param("lstm.b_f", np.ones(d))  # +1 stabilizes early recurrence
        self._param("lstm.b_c", np.zeros(d))
        self._param("lstm.b_o", np.zeros(d))

        if cfg.use_attention:
            self._param("attn.hidden.kernel", _uniform(rng, (1, 1, d, d), d))
            self._param("attn.hidden.bias", np.zeros(d))
            self._param("attn.out.kernel", _uniform(rng, (1, 1, d, 1), d))
            self._param("attn.out.bias", np.zeros(1))

        self._param("head.cls.weight", _uniform(rng, (d, cfg.num_cls_outputs), d))
        self._param("head.cls.bias", np.zeros(cfg.num_cls_outputs))
        self._param("head.loc.weight", _uniform(rng, (d, 4), d))
        self._param("head.loc.bias", np.zeros(4))

    def parameters(self) -> dict[str, ad.Tensor]:
        return self.params

    # -- forward pieces -----------------------------------------------------

    def encode(self, image: Union[np.ndarray, ad.Tensor]) -> ad.Tensor:
        """Image (H, W, 3) in [0, 1] -> feature grid (h, w, c)."""
        x = image if isinstance(image, ad.Tensor) else ad.tensor(image)
        if x.data.ndim != 3 or x.data.shape[2] != self.config.in_channels:
            raise ad.ShapeError(f"expected (H, W, {self.config.in_channels}) image, got {x.shape}")
        if min(x.data.shape[:2]) < self.config.downsample * 2:
            raise ad.ShapeError(f"image {x.shape} smaller than downsample budget")
        for s in range(len(self.config.encoder_channels)):
            x = ad.conv2d(x, self.params[f"enc.{s}.kernel"], self.params[f"enc.{s}.bias"])
            x = ad.tanh(x)
            x = ad.avgpool2(x)
        return x

    def fuse_positional(self, feats: ad.Tensor) -> ad.Tensor:
        """Append the two index channels fx[i, j] = j and fy[i, j] = i."""
        h, w, _ = feats.data.shape
        fx = np.tile(np.arange(w, dtype=np.float64), (h, 1))[..., None]
        fy = np.tile(np.arange(h, dtype=np.float64)[:, None], (1, w))[..., None]
        return ad.concat_last([feats, ad.tensor(fx), ad.tensor(fy)])

    def initial_state(self) -> DecoderState:
        fs, d = self.config.feature_size, self.config.decoder_channels
        return DecoderState(ad.tensor(np.zeros((fs, fs, d))), ad.tensor(np.zeros((fs, fs, d))))

    def _input_gates(self, x: ad.Tensor) -> ad.Tensor:
        """Stacked i|f|c|o pre-activations from the (constant) input tensor."""
        wx = ad.concat_last([self.params[f"lstm.w_x{g}"] for g in "ifco"])
        b = ad.concat_last([self.params[f"lstm.b_{g}"] for g in "ifco"])
        return ad.conv2d(x, wx, b)

    def _hidden_kernel(self) -> ad.Tensor:
        return ad.concat_last([self.params[f"lstm.w_h{g}"] for g in "ifco"])

    def _step(self, state: DecoderState, x_gates: ad.Tensor, wh: ad.Tensor) -> DecoderState:
        d = self.config.decoder_channels
        pre = ad.add(x_gates, ad.conv2d(state.h, wh))
        i = ad.sigmoid(ad.add(ad.slice_last(pre, 0, d), ad.hadamard(self.params["lstm.w_ci"], state.c)))
        f = ad.sigmoid(ad.add(ad.slice_last(pre, d, 2 * d), ad.hadamard(self.params["lstm.w_cf"], state.c)))
        g = ad.tanh(ad.slice_last(pre, 2 * d, 3 * d))
        c_new = ad.add(ad.hadamard(f, state.c), ad.hadamard(i, g))
        o = ad.sigmoid(ad.add(ad.slice_last(pre, 3 * d, 4 * d), ad.hadamard(self.params["lstm.w_co"], c_new)))
        h_new = ad.hadamard(o, ad.tanh(c_new))
        return DecoderState(h_new, c_new)

    def convlstm_step(self, state: DecoderState, x: ad.Tensor) -> DecoderState:
        """One recurrence step on input tensor x of shape (h, w, c + 2)."""
        return self._step(state, self._input_gates(x), self._hidden_kernel())

    def attend(self, h: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        """Pool the hidden grid to a d-vector; returns (vector, flat weights).

        With attention disabled this degrades to spatial average pooling
        under a uniform weight map.
        """
        hh, ww, _ = h.data.shape
        if not self.config.use_attention:
            weights = ad.tensor(np.full(hh * ww, 1.0 / (hh * ww)))
            return ad.weighted_pool(h, weights), weights
        hidden = ad.tanh(ad.conv2d(h, self.params["attn.hidden.kernel"], self.params["attn.hidden.bias"]))
        scores = ad.conv2d(hidden, self.params["attn.out.kernel"], self.params["attn.out.bias"])
        weights = ad.softmax(ad.flatten(scores))
        return ad.weighted_pool(h, weights), weights

    def classify(self, o: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        """Class probabilities over |C| classes plus background plus EoS."""
        logits = ad.linear(o, self.params["head.cls.weight"], self.params["head.cls.bias"])
        return ad.softmax(logits), logits

    def localize(self, o: ad.Tensor) -> ad.Tensor:
        """Sigmoid-bounded box offsets (x_tl, y_tl, w, h) in (0, 1)."""
        return ad.sigmoid(ad.linear(o, self.params["head.loc.weight"], self.params["head.loc.bias"]))

    def _predict(self, state: DecoderState) -> Prediction:
        fs = self.config.feature_size
        o, weights = self.attend(state.h)
        p_cls, logits = self.classify(o)
        p_loc = self.localize(o)
        return Prediction(
            p_cls=p_cls,
            cls_logits=logits,
            p_loc=p_loc,
            attention=weights.data.reshape(fs, fs).copy(),
        )

    def decoder_input(self, image) -> ad.Tensor:
        feats = self.encode(image)
        return self.fuse_positional(feats) if self.config.use_positional else feats

    def decode_sequence(self, image, m: int) -> list[Prediction]:
        """Run exactly m decoder iterations from the zero initial state."""
        if m < 1:
            raise ValueError("need at least one decoder iteration")
        x = self.decoder_input(image)
        x_gates = self._input_gates(x)
        wh = self._hidden_kernel()
        state = self.initial_state()
        preds = []
        for _ in range(m):
            state = self._step(state, x_gates, wh)
            preds.append(self._predict(state))
        return preds

    def infer(self, image, max_iters: int = 16) -> InferenceResult:
        """Decode until the EoS class wins the argmax or the cap is hit.

        The EoS prediction and any background-classified predictions are
        dropped; each detection carries its max class probability as score.
        """
        if max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        cfg = self.config
        with ad.no_grad():
            x = self.decoder_input(image)
            x_gates = self._input_gates(x)
            wh = self._hidden_kernel()
            state = self.initial_state()
            steps: list[StepOutput] = []
            stopped = False
            for _ in range(max_iters):
                state = self._step(state, x_gates, wh)
                pred = self._predict(state)
                offsets = pred.loc_values()
                steps.append(
                    StepOutput(
                        class_id=pred.argmax_class,
                        probs=pred.cls_values(),
                        offsets=offsets,
                        box=decode_offsets(offsets),
                        attention=pred.attention,
                    )
                )
                if steps[-1].class_id == cfg.eos_index:
                    stopped = True
                    break
        detections = [
            (s.class_id, float(s.probs[s.class_id]), s.box)
            for s in steps
            if s.class_id != cfg.eos_index and s.class_id != cfg.background_index
        ]
        return InferenceResult(
            detections=detections,
            attention_maps=[s.attention for s in steps],
            steps=steps,
            stopped_by_eos=stopped,
        )


# ---------------------------------------------------------------------------
# checkpoint io: text header (config + tensor index) then raw <f8 payload


def save_checkpoint(path, model: SequentialDetector) -> None:
    index = []
    offset = 0
    blobs = []
    for name, p in model.params.items():
        blob = p.data.astype("<f8").tobytes()
        index.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
        f.write(f"{len(header_bytes)}\n".encode())
        f.write(header_bytes)
        f.write(b"".join(blobs))


def load_checkpoint(path) -> SequentialDetector:
    """Rebuild a model from a checkpoint, validating every tensor shape."""
    try:
        with open(path, "rb") as f:
            magic = f.readline().decode(errors="replace").strip()
            if magic != f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}":
                raise CheckpointError(f"{path}: not a {CHECKPOINT_MAGIC} file")
            try:
                header_len = int(f.readline().decode().strip())
            except ValueError as e:
                raise CheckpointError(f"{path}: bad header length") from e
            try:
                header = json.loads(f.read(header_len).decode())
            except (json.JSONDecodeError, UnicodeDecodeError) as e:
                raise CheckpointError(f"{path}: unreadable header: {e}") from e
            payload = f.read()
    except OSError as e:
        raise CheckpointError(f"{path}: {e}") from e

    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: bad config in header: {e}") from e

    model = SequentialDetector(config, rng=0)
    index = {entry["name"]: entry for entry in header.get("tensors", [])}
    if set(index) != set(model.params):
        missing = sorted(set(model.params) - set(index))
        extra = sorted(set(index) - set(model.params))
        raise CheckpointError(f"{path}: tensor index mismatch (missing {missing}, extra {extra})")
    for name, p in model.params.items():
        entry = index[name]
        shape = tuple(entry["shape"])
        if shape != p.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {shape}, config requires {p.data.shape}"
            )
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated for tensor {name}")
        p.data = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).astype(np.float64)
    return model
