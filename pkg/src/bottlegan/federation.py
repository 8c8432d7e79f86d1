"""Federated BottleGAN: client training, server distillation, and weight
aggregation (FedAvgM) with online restaining of client batches.

Clients and server run in-process, but everything that crosses the
client/server boundary is a :class:`ClientMsg` holding checkpoint bytes.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from . import checkpoint
from .downstream import SegNet, evaluate_segmentation, seg_step
from .exceptions import ConfigError, InvalidInputError, ProtocolError
from .models import ModelBundle, to_numpy, to_tensor
from .stain import od_to_rgb, rgb_to_od
from .trainer import ModelConfig, TrainConfig, train_bottlegan

logger = logging.getLogger(__name__)

MSG_KEYS = ModelBundle.GENERATOR_KEYS


@dataclass(frozen=True)
class ClientMsg:
    """Local generators and style code of one client, as checkpoint bytes."""

    client_id: int
    payload: bytes

    def tensors(self):
        return checkpoint.decode(self.payload)

    def bundle(self):
        return checkpoint.bundle_from_tensors(self.tensors())


def validate_msg(msg):
    """Check that a message carries only generator and style-bank tensors."""
    names = msg.tensors().keys()
    bad = [n for n in names if n.split(".", 1)[0] not in MSG_KEYS]
    if bad:
        raise ProtocolError(f"client message carries disallowed tensors: {bad}")
    for key in MSG_KEYS:
        if not any(n.startswith(key + ".") for n in names):
            raise ProtocolError(f"client message lacks {key}")
    return True


@dataclass
class FedConfig:
    rounds: int = 40
    clients_per_round: int = 4
    local_epochs: int = 1
    batch_size: int = 4
    client_lr: float = 0.05
    server_momentum: float = 0.9
    server_lr: float = 1.0
    seed: int = 0

    def validate(self, n_clients=None):
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds, local_epochs and batch_size must be >= 1")
        if self.clients_per_round < 1 or (n_clients is not None and self.clients_per_round > n_clients):
            raise ConfigError("clients_per_round must lie in [1, K]")
        if not 0 <= self.server_momentum < 1 or self.server_lr <= 0 or self.client_lr < 0:
            raise ConfigError("invalid server momentum or learning rate")
        return self


@dataclass
class ServerState:
    weights: OrderedDict
    momentum: OrderedDict
    round: int = 0

    @classmethod
    def init(cls, weights):
        w = OrderedDict((k, v.detach().to(torch.float64).clone()) for k, v in weights.items())
        return cls(w, OrderedDict((k, torch.zeros_like(v)) for k, v in w.items()), 0)


# -- Federated learning of BottleGAN ---------------------------------------


def client_train(k, client_images, reference_images, cfg=None, model_cfg=None, metrics_path=None):
    """Train a local BottleGAN between client ``k``'s style and the reference.

    Images are RGB arrays. Labels are never needed. Returns a
    :class:`ClientMsg` with ``G_s``, ``G_s_inv`` and the one-row style bank.
    """
    if len(client_images) < 1:
        raise InvalidInputError(f"client {k} has no images")
    stained = [(rgb_to_od(im), int(k)) for im in client_images]
    reference = [rgb_to_od(im) for im in reference_images]
    result = train_bottlegan(stained, reference, cfg, model_cfg, metrics_path=metrics_path)
    payload = checkpoint.encode(checkpoint.bundle_tensors(result.bundle, MSG_KEYS))
    return ClientMsg(int(k), payload)


def restain_reference(msg, reference_images):
    """Apply a client's restaining generator to the reference set (X-hat_k)."""
    bundle = msg.bundle()
    od = to_tensor([rgb_to_od(im) for im in reference_images])
    return list(to_numpy(bundle.restain(od, [msg.client_id] * len(od))))


def distill_dataset(msgs, reference_images):
    """X-hat: the reference set restained by every client, as (OD, client id) pairs."""
    if not msgs:
        raise ProtocolError("server_distill needs at least one client message")
    ids = [m.client_id for m in msgs]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate client ids")
    stained = []
    for msg in sorted(msgs, key=lambda m: m.client_id):
        validate_msg(msg)
        stained.extend((od, msg.client_id) for od in restain_reference(msg, reference_images))
    return stained


def server_distill(msgs, reference_images, cfg=None, model_cfg=None, metrics_path=None):
    """Distill all client BottleGANs into one global BottleGAN.

    Every client's restaining generator is applied to the public reference
    set; the global model is then trained on that union against the
    reference set. Returns the :class:`~bottlegan.trainer.TrainResult`.
    """
    stained = distill_dataset(msgs, reference_images)
    reference = [rgb_to_od(im) for im in reference_images]
    return train_bottlegan(stained, reference, cfg, model_cfg, metrics_path=metrics_path)


def build_decomposed(content, bundle, style_ids=None):
    """Render every content item in every style of the global bundle.

    ``content`` is a list of ``(reference-style RGB image, label)`` pairs;
    the result lists ``(RGB image, label, style_id)`` with
    ``len(content) * len(styles)`` entries.
    """
    styles = list(bundle.bank.ids if style_ids is None else style_ids)
    if not content:
        return []
    od = to_tensor([rgb_to_od(im) for im, _ in content])
    out = []
    for sid in styles:
        rendered = od_to_rgb(to_numpy(bundle.restain(od, [sid] * len(od))))
        out.extend((img, label, sid) for img, (_, label) in zip(rendered, content))
    return out


# -- Weight aggregation with BottleGAN ----------------------------------------


class OnlineRestainer:
    """Normalize a client batch with the client's own generator and style
    code, then restain it with the global generator under uniformly drawn
    global style codes."""

    def __init__(self, client_id, local_bundle, global_bundle):
        self.client_id = int(client_id)
        self.local = local_bundle
        self.global_bundle = global_bundle
        self.styles = np.asarray(global_bundle.bank.ids)

    @classmethod
    def from_msg(cls, client_msg, global_bundle):
        return cls(client_msg.client_id, client_msg.bundle(), global_bundle)

    def draw_styles(self, n, rng):
        return self.styles[rng.integers(0, len(self.styles), size=n)].tolist()

    def __call__(self, rgb, rng):
        od = -torch.log(rgb.clamp(min=1.0 / 255.0, max=1.0))
        normalized = self.local.normalize(od, [self.client_id] * len(od))
        restained = self.global_bundle.restain(normalized, self.draw_styles(len(od), rng))
        return torch.exp(-restained).clamp(0.0, 1.0)


def _split_batches(images, masks, batch_size, rng):
    order = rng.permutation(len(images))
    return [(images[order[i:i + batch_size]], masks[order[i:i + batch_size]])
            for i in range(0, len(order), batch_size)]


def wa_client_update(k, weights, images, masks, cfg, augment=None, rng=None):
    """Local epochs of supervised training starting from the global weights.

    ``images`` is an N x 3 x H x W RGB tensor and ``masks`` N x H x W.
    ``augment(batch, rng)`` restains each batch before the gradient step;
    ``None`` gives plain local training. Returns the updated state dict.
    """
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, k])
    model = SegNet()
    model.load_state_dict(OrderedDict((n, v.to(torch.float32)) for n, v in weights.items()))
    for _ in range(cfg.local_epochs):
        for x, y in _split_batches(images, masks, cfg.batch_size, rng):
            if augment is not None:
                x = augment(x, rng)
            seg_step(model, x, y, cfg.client_lr)
    return OrderedDict((n, v.detach().clone()) for n, v in model.state_dict().items())


def fedavgm_aggregate(state, client_weights, cfg):
    """Server momentum update ``v <- beta v + (w - mean_k w_k)``, ``w <- w - eta v``.

    The client mean is taken over values sorted per entry, which makes the
    result exactly invariant to the order of ``client_weights``.
    """
    if not client_weights:
        raise ProtocolError("aggregation needs at least one client result")
    new_w, new_v = OrderedDict(), OrderedDict()
    for name, w in state.weights.items():
        try:
            stacked = torch.stack([cw[name].to(torch.float64) for cw in client_weights])
        except (KeyError, RuntimeError) as err:
            raise ProtocolError(f"client weights do not match server weights at {name}") from err
        if stacked.shape[1:] != w.shape:
            raise ProtocolError(f"shape mismatch at {name}")
        mean = torch.sort(stacked, dim=0).values.sum(dim=0) / len(client_weights)
        v = cfg.server_momentum * state.momentum[name] + (w - mean)
        new_v[name] = v
        new_w[name] = w - cfg.server_lr * v
    return ServerState(new_w, new_v, state.round + 1)


@dataclass
class FederateResult:
    model: SegNet
    metrics: list
    msgs: list = field(default_factory=list)
    global_bundle: ModelBundle | None = None


def _stack_rgb(images):
    return torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2).astype(np.float32))


def held_out_split(dataset):
    images = [im for c in dataset.clients for im in c.test_images]
    masks = [s.label for c in dataset.clients for s in c.test_samples]
    return _stack_rgb(images), np.stack(masks)


def federate(dataset, cfg=None, train_cfg=None, model_cfg=None, use_bottlegan=True,
             msgs=None, global_bundle=None, metrics_path=None, distill_cfg=None):
    """Run the full pipeline on a synthetic federation.

    With ``use_bottlegan`` every client (labeled or not) trains a local
    BottleGAN, the server distills them, and the weight-aggregation rounds
    restain labeled batches online. Without it the same rounds run as plain
    FedAvgM. Pre-trained ``msgs`` / ``global_bundle`` skip the GAN stages.
    """
    cfg = (cfg or FedConfig()).validate()
    train_cfg = train_cfg or TrainConfig()
    labeled = [c for c in dataset.clients if c.n_labeled > 0]
    if not labeled:
        raise ConfigError("weight aggregation needs at least one labeled client")

    restainers = {}
    if use_bottlegan:
        if msgs is None:
            msgs = [client_train(c.style_id, c.images, dataset.reference_images, train_cfg, model_cfg)
                    for c in dataset.clients]
        if global_bundle is None:
            global_bundle = server_distill(msgs, dataset.reference_images, distill_cfg or train_cfg, model_cfg).bundle
        by_id = {m.client_id: m for m in msgs}
        restainers = {c.style_id: OnlineRestainer.from_msg(by_id[c.style_id], global_bundle) for c in labeled}

    data = {}
    for c in labeled:
        pairs = c.labeled_pairs
        data[c.style_id] = (_stack_rgb([p[0] for p in pairs]), torch.from_numpy(np.stack([p[1] for p in pairs])))
    test_x, test_y = held_out_split(dataset)

    model = SegNet(seed=cfg.seed)
    state = ServerState.init(model.state_dict())
    rng = np.random.default_rng(cfg.seed)
    labeled_ids = np.array(sorted(data))
    m = min(cfg.clients_per_round, len(labeled_ids))
    metrics = []
    sink = open(metrics_path, "a") if metrics_path is not None else None
    try:
        for t in range(cfg.rounds):
            sampled = np.sort(rng.choice(labeled_ids, size=m, replace=False)).tolist()
            updates = []
            for k in sampled:
                x, y = data[k]
                updates.append(
                    wa_client_update(k, state.weights, x, y, cfg, restainers.get(k),
                                     np.random.default_rng([cfg.seed, t, k]))
                )
            state = fedavgm_aggregate(state, updates, cfg)
            model.load_state_dict(OrderedDict((n, v.to(torch.float32)) for n, v in state.weights.items()))
            record = {"round": t + 1, "clients": sampled, **evaluate_segmentation(model, test_x, test_y)}
            metrics.append(record)
            if sink is not None:
                sink.write(json.dumps(record) + "\n")
            logger.info("round %d: iou=%.4f ece=%.4f nll=%.4f", t + 1, record["iou"], record["ece"], record["nll"])
    finally:
        if sink is not None:
            sink.close()
    return FederateResult(model, metrics, msgs or [], global_bundle)
