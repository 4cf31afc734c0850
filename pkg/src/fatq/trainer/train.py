"""SGD training loop for full-precision pre-training and QAT fine-tuning."""
from dataclasses import asdict, dataclass

import numpy as np

from fatq.numerics import make_rng
from fatq.quantizers import UNIFORM
from fatq.trainer.checkpoint import Checkpoint
from fatq.trainer.layers import QatSettings
from fatq.trainer.model import TinyCNN

# Full-precision training from scratch needs a larger step than fine-tuning,
# whose default is ``TrainConfig.lr``.
PRETRAIN_LR = 0.05


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.01
    milestones: tuple = (0.5, 0.75)  # fractions of ``epochs``
    decay: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    seed: int = 0
    mode: str = "fp"
    bits_w: int = 4
    bits_a: int = 4
    scheme: str = UNIFORM
    norm_path: bool = True
    weight_norm: bool = False

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and lr > 0")
        if list(self.milestones) != sorted(self.milestones) or any(m <= 0 for m in self.milestones):
            raise ValueError(f"milestones must be positive and sorted, got {self.milestones}")

    def settings(self):
        return QatSettings(
            mode=self.mode,
            bits_w=self.bits_w,
            bits_a=self.bits_a,
            scheme=self.scheme,
            norm_path=self.norm_path,
            weight_norm=self.weight_norm,
        )

    def lr_at(self, epoch):
        passed = sum(1 for m in self.milestones if epoch >= m * self.epochs)
        return self.lr * self.decay**passed


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def evaluate(model, x, y, settings=None):
    """Return ``(loss, accuracy)`` over a full split."""
    logits = model.predict(x, settings)
    loss, _ = softmax_xent(logits, y)
    return loss, float(np.mean(logits.argmax(axis=1) == y))


class _Sgd:
    def __init__(self, cfg):
        self.cfg = cfg
        self.velocity = {}

    def step(self, key, param, grad, lr, decay=0.0):
        g = grad + decay * param
        v = self.velocity.get(key)
        v = g if v is None else self.cfg.momentum * v + g
        self.velocity[key] = v
        return param - lr * v


def _apply_grads(model, grads, opt, lr, cfg):
    quant = model.settings.mode != "fp"
    for i, (layer, g) in enumerate(zip(model.layers, grads)):
        layer.weight = opt.step((i, "w"), layer.weight, g["weight"], lr, cfg.weight_decay)
        if g["generator"] is not None:
            layer.generator = opt.step((i, "g"), layer.generator, g["generator"], lr)
        if quant:
            layer.alpha_w = float(opt.step((i, "aw"), layer.alpha_w, g["alpha_w"], lr))
            layer.alpha_a = float(opt.step((i, "aa"), layer.alpha_a, g["alpha_a"], lr))
            layer.clamp_alphas()
        layer.touch()


def train(model, data, cfg, history=None, extra=None):
    """Run SGD for ``cfg.epochs`` epochs; deterministic given ``cfg.seed``.

    ``model.settings`` is replaced by the config's settings. Returns
    ``(checkpoint, log)`` where ``log`` holds ``(epoch, split, loss, acc)``.
    """
    model.settings = cfg.settings()
    rng = make_rng(cfg.seed)
    log = list(history or [])
    opt = _Sgd(cfg)
    n = len(data.x_train)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        tot_loss, tot_correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = data.x_train[idx], data.y_train[idx]
            logits, caches = model.forward(xb)
            loss, g = softmax_xent(logits, yb)
            grads = model.backward(g, caches)
            _apply_grads(model, grads, opt, lr, cfg)
            tot_loss += loss * len(idx)
            tot_correct += int(np.sum(logits.argmax(axis=1) == yb))
        log.append((epoch, "train", tot_loss / n, tot_correct / n))
        test_loss, test_acc = evaluate(model, data.x_test, data.y_test)
        log.append((epoch, "test", test_loss, test_acc))
    ckpt = Checkpoint(
        model=model,
        epoch=cfg.epochs,
        history=log,
        rng_state=rng.bit_generator.state,
        extra={"train_config": _config_record(cfg), **(extra or {})},
    )
    return ckpt, log


def _config_record(cfg):
    rec = asdict(cfg)
    rec["milestones"] = list(cfg.milestones)
    return rec


def pretrain(data, cfg):
    """Full-precision training from a He-initialized network."""
    if cfg.mode != "fp":
        raise ValueError("pre-training runs in fp mode")
    model = TinyCNN.create(make_rng(cfg.seed + 1_000_003), n_classes=data.n_classes,
                           in_channels=data.x_train.shape[1])
    return train(model, data, cfg)


def finetune(fp_ckpt, data, cfg, calib_size=256):
    """Quantization-aware fine-tuning (``ste`` or ``fat``) from an fp checkpoint."""
    if cfg.mode == "fp":
        raise ValueError("fine-tuning needs a quantized mode ('ste' or 'fat')")
    model = fp_ckpt.model.copy()
    model.settings = cfg.settings()
    model.init_quantization(data.x_train[:calib_size])
    return train(model, data, cfg, extra={"parent_epoch": fp_ckpt.epoch})
