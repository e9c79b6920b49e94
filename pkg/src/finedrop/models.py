"""Residual MLPs whose penultimate representation is an exact telescoping sum.

A model is an input projection, a stack of two-layer residual blocks with
identity skips (no normalization layers), and a linear head. Because block
i adds f_i(h) onto its input, the representation fed to the head is

    phi(x) = proj(x) + f_1(...) + f_2(...) + ... + f_depth(...)

and `block_contributions` returns exactly those addends, in order, so their
left-to-right sum reproduces the forward representation bit for bit. The
second layer of every block is zero-initialized: a fresh network computes
identity-plus-projection, which both stabilizes from-scratch training and
makes the degenerate decomposition directly testable.

Checkpoints are a single file: one line of compact JSON (the manifest:
architecture, parameter shapes, iteration, run id, rng state) terminated by
a newline, followed by the flat parameter vector as raw little-endian
float64 bytes. Round trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import FormatError, ValidationError
from .regularizers import DropoutSpec, batch_dropout_mask

__all__ = [
    "ResidualBlockParams",
    "ResidualModel",
    "Checkpoint",
    "new_residual_model",
    "forward",
    "block_contributions",
    "reinit_head",
    "flatten_params",
    "checkpoint_from_model",
    "model_from_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]

PROVENANCE_TAGS = ("scratch", "pretrained-plain", "pretrained-rich")


@dataclass
class ResidualBlockParams:
    """Parameters of one block: f(h) = w2 . relu(w1 . h + b1) + b2."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor


@dataclass
class ResidualModel:
    proj_w: ad.Tensor
    proj_b: ad.Tensor
    blocks: list[ResidualBlockParams]
    head_w: ad.Tensor
    head_b: ad.Tensor
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.proj_w.shape[0]

    @property
    def width(self) -> int:
        return self.proj_w.shape[1]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[1]

    def arch(self) -> dict:
        """Architecture dims, the part of the manifest load-time checks compare."""
        return {
            "input_dim": self.input_dim,
            "width": self.width,
            "depth": self.depth,
            "block_hidden": self.blocks[0].w1.shape[1] if self.blocks else self.width,
            "num_classes": self.num_classes,
        }

    def named_parameters(self) -> list[tuple[str, ad.Tensor]]:
        """Canonical (name, tensor) order used by flattening and checkpoints."""
        out = [("proj_w", self.proj_w), ("proj_b", self.proj_b)]
        for i, blk in enumerate(self.blocks):
            out += [
                (f"block{i}.w1", blk.w1),
                (f"block{i}.b1", blk.b1),
                (f"block{i}.w2", blk.w2),
                (f"block{i}.b2", blk.b2),
            ]
        out += [("head_w", self.head_w), ("head_b", self.head_b)]
        return out

    def parameters(self) -> list[ad.Tensor]:
        return [t for _, t in self.named_parameters()]

    def trunk_parameters(self) -> list[ad.Tensor]:
        return [t for name, t in self.named_parameters() if not name.startswith("head")]

    def head_parameters(self) -> list[ad.Tensor]:
        return [t for name, t in self.named_parameters() if name.startswith("head")]

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode class probabilities for an [n, input_dim] batch."""
        logits, _ = forward(self, x, dropout=None)
        return ad.softmax(logits.data)


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def new_residual_model(
    input_dim: int,
    width: int,
    depth: int,
    num_classes: int,
    seed: int,
    block_hidden: int | None = None,
    provenance: str = "scratch",
) -> ResidualModel:
    """Deterministically initialized model; same (dims, seed) gives identical bits.

    Weights are fan-in-scaled uniform, biases zero, and the second layer of
    each block is zero so every f_i starts as the zero function. depth may
    be 0, in which case phi(x) is just the projected input.
    """
    if input_dim < 1 or width < 1 or num_classes < 1:
        raise ValidationError(
            f"dims must be >= 1, got input_dim={input_dim} width={width} num_classes={num_classes}"
        )
    if depth < 0:
        raise ValidationError(f"depth must be >= 0, got {depth}")
    hidden = width if block_hidden is None else int(block_hidden)
    if hidden < 1:
        raise ValidationError(f"block_hidden must be >= 1, got {hidden}")
    if provenance not in PROVENANCE_TAGS:
        raise ValidationError(f"provenance must be one of {PROVENANCE_TAGS}, got {provenance!r}")

    rng = np.random.default_rng(seed)
    proj_w = ad.Tensor(_uniform_fan_in(rng, input_dim, (input_dim, width)), requires_grad=True)
    proj_b = ad.Tensor(np.zeros(width), requires_grad=True)
    blocks = []
    for _ in range(depth):
        w1 = ad.Tensor(_uniform_fan_in(rng, width, (width, hidden)), requires_grad=True)
        b1 = ad.Tensor(np.zeros(hidden), requires_grad=True)
        w2 = ad.Tensor(np.zeros((hidden, width)), requires_grad=True)
        b2 = ad.Tensor(np.zeros(width), requires_grad=True)
        blocks.append(ResidualBlockParams(w1, b1, w2, b2))
    head_w = ad.Tensor(_uniform_fan_in(rng, width, (width, num_classes)), requires_grad=True)
    head_b = ad.Tensor(np.zeros(num_classes), requires_grad=True)
    meta = {"seed": int(seed), "provenance": provenance}
    return ResidualModel(proj_w, proj_b, blocks, head_w, head_b, meta)


def _trunk(model: ResidualModel, x: ad.Tensor) -> tuple[ad.Tensor, list[ad.Tensor]]:
    # Single code path for forward and block_contributions: the running sum
    # h is folded left to right, so summing the returned terms in order is
    # the exact same float op sequence.
    h = ad.add_bias(ad.matmul(x, model.proj_w), model.proj_b)
    terms = [h]
    for blk in model.blocks:
        z = ad.relu(ad.add_bias(ad.matmul(h, blk.w1), blk.b1))
        f = ad.add_bias(ad.matmul(z, blk.w2), blk.b2)
        terms.append(f)
        h = ad.add(h, f)
    return h, terms


def _as_batch(model: ResidualModel, x) -> ad.Tensor:
    xt = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    if xt.data.ndim != 2 or xt.shape[1] != model.input_dim:
        raise ValidationError(
            f"input must be [batch, {model.input_dim}], got shape {xt.shape}"
        )
    return xt


def forward(model: ResidualModel, x, dropout: DropoutSpec | None = None):
    """(logits, phi) for an [n, input_dim] batch.

    phi is the pre-dropout penultimate representation. With an active
    train-mode dropout spec, a fresh per-example mask is applied to phi and
    survivors are rescaled by 1/(1-rate) before the head; in eval mode, or
    at rate 0, the head sees phi unchanged and the mask rng is never
    touched, so a rate-0 run is bit-equivalent to having no dropout at all.
    """
    xt = _as_batch(model, x)
    phi, _ = _trunk(model, xt)
    if dropout is not None and dropout.active:
        mask = batch_dropout_mask(phi.shape[0], phi.shape[1], dropout.rate, dropout._require_rng())
        masked = ad.elementwise_mul(phi, ad.Tensor(mask))
        head_in = ad.scale(masked, 1.0 / (1.0 - dropout.rate))
    else:
        head_in = phi
    logits = ad.add_bias(ad.matmul(head_in, model.head_w), model.head_b)
    return logits, phi


def block_contributions(model: ResidualModel, x) -> list[ad.Tensor]:
    """The addends [proj(x), f_1(.), ..., f_depth(.)] whose ordered sum is phi."""
    xt = _as_batch(model, x)
    _, terms = _trunk(model, xt)
    return terms


def reinit_head(model: ResidualModel, num_classes: int, seed: int) -> ResidualModel:
    """Fresh copy with the trunk bit-identical and a newly initialized head."""
    if num_classes < 1:
        raise ValidationError(f"num_classes must be >= 1, got {num_classes}")
    rng = np.random.default_rng(seed)
    head_w = ad.Tensor(_uniform_fan_in(rng, model.width, (model.width, num_classes)), requires_grad=True)
    head_b = ad.Tensor(np.zeros(num_classes), requires_grad=True)
    blocks = [
        ResidualBlockParams(
            ad.Tensor(blk.w1.data.copy(), requires_grad=True),
            ad.Tensor(blk.b1.data.copy(), requires_grad=True),
            ad.Tensor(blk.w2.data.copy(), requires_grad=True),
            ad.Tensor(blk.b2.data.copy(), requires_grad=True),
        )
        for blk in model.blocks
    ]
    return ResidualModel(
        ad.Tensor(model.proj_w.data.copy(), requires_grad=True),
        ad.Tensor(model.proj_b.data.copy(), requires_grad=True),
        blocks,
        head_w,
        head_b,
        dict(model.meta),
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Flat parameter vector plus the manifest that interprets it."""

    params: np.ndarray
    manifest: dict
    iteration: int
    run_id: str
    rng_state: dict | None = None

    @property
    def provenance(self) -> str:
        return self.manifest.get("provenance", "scratch")


def flatten_params(model: ResidualModel) -> np.ndarray:
    return np.concatenate([t.data.reshape(-1) for t in model.parameters()])


def _shape_manifest(model: ResidualModel) -> list:
    return [[name, list(t.shape)] for name, t in model.named_parameters()]


def checkpoint_from_model(
    model: ResidualModel, iteration: int = 0, run_id: str = "", rng_state: dict | None = None
) -> Checkpoint:
    manifest = {
        "schema_version": 1,
        "arch": model.arch(),
        "param_shapes": _shape_manifest(model),
        "total": int(sum(t.data.size for t in model.parameters())),
        "seed": model.meta.get("seed"),
        "provenance": model.meta.get("provenance", "scratch"),
    }
    return Checkpoint(flatten_params(model), manifest, int(iteration), str(run_id), rng_state)


def model_from_checkpoint(ckpt: Checkpoint) -> ResidualModel:
    """Rebuild a model from a checkpoint; inverse of checkpoint_from_model."""
    arch = ckpt.manifest["arch"]
    model = new_residual_model(
        arch["input_dim"],
        arch["width"],
        arch["depth"],
        arch["num_classes"],
        seed=ckpt.manifest.get("seed") or 0,
        block_hidden=arch.get("block_hidden"),
        provenance=ckpt.manifest.get("provenance", "scratch"),
    )
    flat = np.asarray(ckpt.params, dtype=np.float64)
    if flat.size != ckpt.manifest["total"]:
        raise ValidationError(
            f"parameter vector length {flat.size} does not match manifest total {ckpt.manifest['total']}"
        )
    offset = 0
    for (name, tensor), (m_name, m_shape) in zip(model.named_parameters(), ckpt.manifest["param_shapes"]):
        if name != m_name or list(tensor.shape) != list(m_shape):
            raise ValidationError(
                f"manifest entry {m_name}{m_shape} does not match architecture slot {name}{list(tensor.shape)}"
            )
        n = tensor.data.size
        # copy, never view: model weights must not alias the checkpoint vector
        tensor.data = flat[offset : offset + n].reshape(tensor.shape).copy()
        offset += n
    return model


def save_checkpoint(model: ResidualModel, iteration: int, run_id: str, path, rng_state: dict | None = None) -> Checkpoint:
    """Write manifest line + raw '<f8' parameter block; returns the checkpoint."""
    ckpt = checkpoint_from_model(model, iteration, run_id, rng_state)
    write_checkpoint(ckpt, path)
    return ckpt


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    header = dict(ckpt.manifest)
    header["iteration"] = ckpt.iteration
    header["run_id"] = ckpt.run_id
    header["rng_state"] = ckpt.rng_state
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(ckpt.params, dtype="<f8").tobytes())


def load_checkpoint(path, expect_arch: dict | None = None) -> Checkpoint:
    """Read a checkpoint file; refuses truncated files and mismatched manifests.

    expect_arch, when given, must equal the manifest's arch dict; a mismatch
    raises ValidationError naming both.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError("no manifest line found", offset=0)
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", offset=0) from exc
    for key in ("arch", "param_shapes", "total"):
        if key not in header:
            raise FormatError(f"manifest is missing required key {key!r}", offset=0)
    body = raw[newline + 1 :]
    expected_bytes = int(header["total"]) * 8
    if len(body) != expected_bytes:
        raise FormatError(
            f"parameter block has {len(body)} bytes, manifest promises {expected_bytes}",
            offset=newline + 1,
        )
    if expect_arch is not None and dict(expect_arch) != dict(header["arch"]):
        raise ValidationError(
            f"architecture mismatch: file manifest {header['arch']} vs requested {dict(expect_arch)}"
        )
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    manifest = {k: header[k] for k in header if k not in ("iteration", "run_id", "rng_state")}
    return Checkpoint(
        params,
        manifest,
        int(header.get("iteration", 0)),
        str(header.get("run_id", "")),
        header.get("rng_state"),
    )
