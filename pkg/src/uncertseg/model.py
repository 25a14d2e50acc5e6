"""Encoder-decoder segmentation networks built on the engine kernels.

Three variants share one topology (5 encoder blocks, 4 decoder blocks,
skip concatenations, nearest-neighbor upsampling, final 1x1 convolution):

* ``unet``  - dropout only at the bottleneck (rate 0.5)
* ``u2net`` - dropout after every convolutional block except the first
  encoder and last decoder block; 0.5 at the bottleneck, 0.1 elsewhere
* ``bunet`` - u2net plus a third output channel predicting a per-pixel
  log-variance, trained with Gaussian logit noise (``aleatoric_loss``)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .engine import functional as F
from .engine.optim import Parameter
from .rng import RngState

UNET = "unet"
U2NET = "u2net"
BUNET = "bunet"
VARIANTS = (UNET, U2NET, BUNET)

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BOTTLENECK_DROPOUT = 0.5
BLOCK_DROPOUT = 0.1

CHECKPOINT_MANIFEST = "manifest.txt"
_CHECKPOINT_FORMAT = "uncertseg-checkpoint v1"


@dataclass(frozen=True)
class ArchitectureSpec:
    """Channel and dropout plan for one network variant.

    ``base_channels=64`` gives the reference plan (encoder 64..1024); smaller
    bases scale every block proportionally for CPU-budget runs.
    """

    variant: str
    base_channels: int = 64
    input_channels: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")

    @property
    def encoder_channels(self) -> list[int]:
        b = self.base_channels
        return [b, 2 * b, 4 * b, 8 * b, 16 * b]

    @property
    def decoder_channels(self) -> list[int]:
        b = self.base_channels
        return [8 * b, 4 * b, 2 * b, b]

    @property
    def output_channels(self) -> int:
        return 3 if self.variant == BUNET else 2

    @property
    def dropout_plan(self) -> dict[str, float]:
        """Block name -> rate, for the blocks that carry dropout."""
        if self.variant == UNET:
            return {"enc5": BOTTLENECK_DROPOUT}
        plan = {f"enc{i}": BLOCK_DROPOUT for i in (2, 3, 4)}
        plan["enc5"] = BOTTLENECK_DROPOUT
        plan.update({f"dec{i}": BLOCK_DROPOUT for i in (1, 2, 3)})
        return plan


class Conv2dLayer:
    """3x3 or 1x1 convolution with He fan-in normal init and zero bias."""

    def __init__(self, cin: int, cout: int, kernel: int, padding: int, rng: RngState, name: str):
        fan_in = cin * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        w = (rng.normal((cout, cin, kernel, kernel)) * std).astype(np.float32)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(cout, dtype=np.float32), f"{name}.bias")
        self.padding = padding

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x):
        return F.conv2d(x, self.weight.value, self.bias.value, self.padding)

    def backward(self, grad, cache):
        dx, dw, db = F.conv2d_backward(grad, cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class BatchNorm2dLayer:
    def __init__(self, channels: int, name: str):
        self.gamma = Parameter(np.ones(channels, dtype=np.float32), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=np.float32), f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.name = name

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def forward(self, x, mode: str):
        return F.batchnorm(
            x,
            self.gamma.value,
            self.beta.value,
            self.running_mean,
            self.running_var,
            mode,
            momentum=BN_MOMENTUM,
            eps=BN_EPS,
        )

    def backward(self, grad, cache):
        dx, dgamma, dbeta = F.batchnorm_backward(grad, cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class ConvBlock:
    """[conv3x3 -> batchnorm -> leaky ReLU] x2, optional trailing dropout."""

    def __init__(self, cin: int, cout: int, dropout_rate: float, rng: RngState, name: str):
        self.conv1 = Conv2dLayer(cin, cout, 3, 1, rng, f"{name}.conv1")
        self.bn1 = BatchNorm2dLayer(cout, f"{name}.bn1")
        self.conv2 = Conv2dLayer(cout, cout, 3, 1, rng, f"{name}.conv2")
        self.bn2 = BatchNorm2dLayer(cout, f"{name}.bn2")
        self.dropout_rate = dropout_rate
        self.name = name

    def parameters(self) -> list[Parameter]:
        return self.conv1.parameters() + self.bn1.parameters() + self.conv2.parameters() + self.bn2.parameters()

    def forward(self, x, mode: str, rng: RngState | None):
        h, c1 = self.conv1.forward(x)
        h, n1 = self.bn1.forward(h, mode)
        h, r1 = F.leaky_relu(h, LEAKY_SLOPE)
        h, c2 = self.conv2.forward(h)
        h, n2 = self.bn2.forward(h, mode)
        h, r2 = F.leaky_relu(h, LEAKY_SLOPE)
        active = self.dropout_rate > 0.0 and mode != F.EVAL
        h, dmask = F.dropout(h, self.dropout_rate, rng, active)
        return h, (c1, n1, r1, c2, n2, r2, dmask)

    def backward(self, grad, cache):
        c1, n1, r1, c2, n2, r2, dmask = cache
        g = F.dropout_backward(grad, dmask)
        g = F.leaky_relu_backward(g, r2)
        g = self.bn2.backward(g, n2)
        g = self.conv2.backward(g, c2)
        g = F.leaky_relu_backward(g, r1)
        g = self.bn1.backward(g, n1)
        return self.conv1.backward(g, c1)


class Network:
    """One built architecture with its parameters, running stats and mode.

    Eval and mc-sample forward passes are read-only on the network (per-call
    rng, no cache retention), so they are safe to run concurrently. Training
    (train-mode forward, ``backward``, optimizer steps) has a single-writer
    contract.
    """

    def __init__(self, spec: ArchitectureSpec, rng: RngState):
        self.spec = spec
        plan = spec.dropout_plan
        enc_in = [spec.input_channels] + spec.encoder_channels[:-1]
        self.enc_blocks = [
            ConvBlock(enc_in[i], spec.encoder_channels[i], plan.get(f"enc{i + 1}", 0.0), rng, f"enc{i + 1}")
            for i in range(5)
        ]
        dec_in = []
        prev = spec.encoder_channels[-1]
        for i, cout in enumerate(spec.decoder_channels):
            skip = spec.encoder_channels[3 - i]
            dec_in.append(prev + skip)
            prev = cout
        self.dec_blocks = [
            ConvBlock(dec_in[i], spec.decoder_channels[i], plan.get(f"dec{i + 1}", 0.0), rng, f"dec{i + 1}")
            for i in range(4)
        ]
        self.final = Conv2dLayer(spec.decoder_channels[-1], spec.output_channels, 1, 0, rng, "final")
        self._mode = F.EVAL
        self._tape = None

    @property
    def mode(self) -> str:
        return self._mode

    def set_mode(self, mode: str) -> None:
        if mode not in F.MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {F.MODES}")
        self._mode = mode

    def blocks(self):
        return list(self.enc_blocks) + list(self.dec_blocks)

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for blk in self.blocks():
            params.extend(blk.parameters())
        params.extend(self.final.parameters())
        return params

    def state_entries(self) -> list[tuple[str, np.ndarray]]:
        """Ordered (name, array) pairs: parameters plus batchnorm running stats."""
        entries: list[tuple[str, np.ndarray]] = []
        for blk in self.blocks():
            for conv, bn in ((blk.conv1, blk.bn1), (blk.conv2, blk.bn2)):
                entries.append((conv.weight.name, conv.weight.value))
                entries.append((conv.bias.name, conv.bias.value))
                entries.append((bn.gamma.name, bn.gamma.value))
                entries.append((bn.beta.name, bn.beta.value))
                entries.append((f"{bn.name}.running_mean", bn.running_mean))
                entries.append((f"{bn.name}.running_var", bn.running_var))
        entries.append((self.final.weight.name, self.final.weight.value))
        entries.append((self.final.bias.name, self.final.bias.value))
        return entries

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, target in self.state_entries():
            if name not in arrays:
                raise ValueError(f"checkpoint is missing entry {name!r}")
            src = arrays[name]
            if src.shape != target.shape:
                raise ValueError(f"entry {name!r} has shape {src.shape}, expected {target.shape}")
            target[...] = src

    def forward(self, x: np.ndarray, rng: RngState | None = None) -> np.ndarray:
        """Logits for a batch (N, Cin, H, W); H and W must be multiples of 16."""
        n, cin, h, w = x.shape
        if cin != self.spec.input_channels:
            raise ValueError(f"expected {self.spec.input_channels} input channels, got {cin}")
        if h % 16 or w % 16:
            raise ValueError(
                f"spatial dims {h}x{w} must be divisible by 16 (4 pooling levels); "
                f"pad rows by {(16 - h % 16) % 16} and cols by {(16 - w % 16) % 16}"
            )
        mode = self._mode
        collect = mode == F.TRAIN
        x = np.ascontiguousarray(x, dtype=np.float32)

        skips = []
        pool_caches = []
        enc_caches = []
        h_t = x
        for i, blk in enumerate(self.enc_blocks):
            h_t, cache = blk.forward(h_t, mode, rng)
            enc_caches.append(cache)
            if i < 4:
                skips.append(h_t)
                h_t, pc = F.maxpool2(h_t)
                pool_caches.append(pc)
        dec_caches = []
        up_channels = []
        for i, blk in enumerate(self.dec_blocks):
            up_channels.append(h_t.shape[1])
            up = F.upsample_nearest2(h_t)
            cat = np.concatenate([up, skips[3 - i]], axis=1)
            h_t, cache = blk.forward(cat, mode, rng)
            dec_caches.append(cache)
        logits, final_cache = self.final.forward(h_t)
        self._tape = (enc_caches, pool_caches, dec_caches, up_channels, final_cache) if collect else None
        return logits

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients from a train-mode forward pass."""
        if self._tape is None:
            raise RuntimeError("backward requires a preceding train-mode forward")
        enc_caches, pool_caches, dec_caches, up_channels, final_cache = self._tape
        self._tape = None
        g = self.final.backward(grad_logits, final_cache)
        skip_grads: dict[int, np.ndarray] = {}
        for i in range(3, -1, -1):
            gcat = self.dec_blocks[i].backward(g, dec_caches[i])
            cu = up_channels[i]
            skip_grads[3 - i] = gcat[:, cu:]
            g = F.upsample_nearest2_backward(np.ascontiguousarray(gcat[:, :cu]))
        g = self.enc_blocks[4].backward(g, enc_caches[4])
        for i in range(3, -1, -1):
            g = F.maxpool2_backward(g, pool_caches[i])
            g = g + skip_grads[i]
            g = self.enc_blocks[i].backward(g, enc_caches[i])
        return g


def build_network(spec: ArchitectureSpec, rng: RngState) -> Network:
    """Construct and initialize a network; bit-reproducible for a given rng."""
    return Network(spec, rng)


def forward(net: Network, batch: np.ndarray, rng: RngState | None = None) -> np.ndarray:
    return net.forward(batch, rng)


def count_parameters(net: Network) -> int:
    return int(sum(p.value.size for p in net.parameters()))


def aleatoric_loss(output: np.ndarray, target: np.ndarray, noise_samples: int, rng: RngState):
    """Cross entropy under Gaussian logit noise with predicted variance.

    ``output`` is (N, 3, H, W): two class logits plus a log-variance channel.
    Each of the ``noise_samples`` draws perturbs the logits by
    ``sqrt(exp(log_var)) * eps`` with per-channel standard normal ``eps``;
    the loss is the mean cross entropy over draws. Returns
    ``(loss, grad_output)`` with gradients for logits and log-variance.
    """
    if output.ndim != 4 or output.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) output, got {output.shape}")
    if noise_samples < 1:
        raise ValueError("noise_samples must be >= 1")
    n, _, h, w = output.shape
    logits = output[:, :2]
    std = np.exp(0.5 * output[:, 2]).astype(output.dtype)
    loss_total = 0.0
    dlogits = np.zeros((n, 2, h, w), dtype=output.dtype)
    dlogvar = np.zeros((n, h, w), dtype=output.dtype)
    for _ in range(noise_samples):
        eps = rng.normal((n, 2, h, w)).astype(output.dtype)
        perturbed = logits + std[:, None] * eps
        loss_s, cache = F.softmax_cross_entropy(perturbed, target)
        g = F.softmax_cross_entropy_backward(cache)
        loss_total += loss_s
        dlogits += g
        dlogvar += (g * eps).sum(axis=1) * (0.5 * std)
    scale = np.asarray(1.0 / noise_samples, dtype=output.dtype)
    grad_output = np.concatenate([dlogits * scale, (dlogvar * scale)[:, None]], axis=1)
    return loss_total / noise_samples, grad_output


def save_checkpoint(net: Network, directory: str | Path) -> None:
    """Write the ordered manifest plus one tensor file per state entry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = net.spec
    plan = spec.dropout_plan
    lines = [
        f"format: {_CHECKPOINT_FORMAT}",
        f"variant: {spec.variant}",
        f"base_channels: {spec.base_channels}",
        f"input_channels: {spec.input_channels}",
        f"output_channels: {spec.output_channels}",
        f"dropout_sites: {len(plan)}",
        "dropout_plan: " + ",".join(f"{k}={plan[k]:g}" for k in sorted(plan)),
    ]
    for name, array in net.state_entries():
        filename = f"{name}.tnsr"
        tensorio.save_tensor(directory / filename, array)
        lines.append(f"entry: {name} {filename}")
    (directory / CHECKPOINT_MANIFEST).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_checkpoint(directory: str | Path) -> Network:
    directory = Path(directory)
    manifest = directory / CHECKPOINT_MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    fields: dict[str, str] = {}
    entries: list[tuple[str, str]] = []
    for line in manifest.read_text(encoding="ascii").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(": ")
        if key == "entry":
            name, _, filename = value.partition(" ")
            entries.append((name, filename))
        else:
            fields[key] = value
    if fields.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {fields.get('format')!r}")
    spec = ArchitectureSpec(
        variant=fields["variant"],
        base_channels=int(fields["base_channels"]),
        input_channels=int(fields["input_channels"]),
    )
    net = build_network(spec, RngState(0))
    arrays = {name: tensorio.load_tensor(directory / filename) for name, filename in entries}
    net.load_state(arrays)
    return net
