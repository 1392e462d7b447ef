"""A small CLIP-style image/text encoder pair built on :mod:`vlwb.diffcore`.

Image side: non-overlapping patches -> linear patch embedding -> two tanh
layers -> projection -> L2 normalisation.  Text side: mean of learned token
embeddings -> one tanh layer -> projection -> L2 normalisation.  A learnable
temperature scales cosine similarities into logits.
"""

import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .seeding import rng_for

log = logging.getLogger(__name__)

TEMPERATURE_RANGE = (1.0, 100.0)


@dataclass(frozen=True)
class ModelConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: int = 8
    patch_dim: int = 32
    hidden: int = 64
    token_dim: int = 32
    text_hidden: int = 64
    embed_dim: int = 32
    init_temperature: float = 10.0

    @property
    def image_shape(self):
        return (self.height, self.width, self.channels)

    @property
    def n_patches(self):
        return (self.height // self.patch) * (self.width // self.patch)


class TrainingDiverged(RuntimeError):
    def __init__(self, step):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


class EncoderParams:
    """Named weight tensors plus the configuration that shaped them."""

    names = (
        "patch_w", "patch_b", "img_h1_w", "img_h1_b", "img_h2_w", "img_h2_b", "img_proj",
        "tok_emb", "txt_h_w", "txt_h_b", "txt_proj", "temperature",
    )

    def __init__(self, config, vocab_size, tensors):
        self.config = config
        self.vocab_size = vocab_size
        self.tensors = tensors
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def temperature(self):
        return float(self.tensors["temperature"].data)

    def frozen(self):
        """Constant view for inference and attacks (shares the arrays)."""
        return EncoderParams(self.config, self.vocab_size, {k: dc.Tensor(t.data) for k, t in self.tensors.items()})

    def trainable(self):
        return EncoderParams(
            self.config,
            self.vocab_size,
            {k: dc.Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
        )

    def arrays(self):
        return {k: t.data for k, t in self.tensors.items()}

    def equals(self, other):
        return all(np.array_equal(self[k].data, other[k].data) for k in self.names)


def init_params(config=ModelConfig(), vocab_size=128, seed=0):
    rng = rng_for(seed, "init")
    c = config
    patch_in = c.patch * c.patch * c.channels

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    arrays = {
        "patch_w": dense(patch_in, c.patch_dim),
        "patch_b": np.zeros(c.patch_dim),
        "img_h1_w": dense(c.n_patches * c.patch_dim, c.hidden),
        "img_h1_b": np.zeros(c.hidden),
        "img_h2_w": dense(c.hidden, c.hidden),
        "img_h2_b": np.zeros(c.hidden),
        "img_proj": dense(c.hidden, c.embed_dim),
        "tok_emb": rng.normal(0.0, 1.0, size=(vocab_size, c.token_dim)),
        "txt_h_w": dense(c.token_dim, c.text_hidden),
        "txt_h_b": np.zeros(c.text_hidden),
        "txt_proj": dense(c.text_hidden, c.embed_dim),
        "temperature": np.array(c.init_temperature),
    }
    # small nonzero biases so even an all-zero image maps to a nonzero direction
    for name in ("patch_b", "img_h1_b", "img_h2_b", "txt_h_b"):
        arrays[name] = rng.normal(0.0, 0.01, size=arrays[name].shape)
    return EncoderParams(config, vocab_size, {k: dc.Tensor(v) for k, v in arrays.items()})


# -- encoders -----------------------------------------------------------------

def check_image(image, config):
    data = image.data if isinstance(image, dc.Tensor) else np.asarray(image)
    if data.shape[-3:] != config.image_shape or data.ndim not in (3, 4):
        raise ValueError(f"image shape {data.shape} does not match {config.image_shape}")
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError("image pixels must lie in [0, 1]; clamp before encoding")


def encode_image(params, image):
    """Unit-norm embedding(s) for an ``(H, W, C)`` or ``(B, H, W, C)`` image."""
    c = params.config
    check_image(image, c)
    x = dc.as_tensor(image)
    single = x.ndim == 3
    b = 1 if single else x.shape[0]
    g = c.height // c.patch
    x = dc.reshape(x, (b, g, c.patch, c.width // c.patch, c.patch, c.channels))
    x = dc.permute(x, (0, 1, 3, 2, 4, 5))
    x = dc.reshape(x, (b * c.n_patches, c.patch * c.patch * c.channels))
    x = x @ params["patch_w"] + params["patch_b"]
    x = dc.reshape(x, (b, c.n_patches * c.patch_dim))
    x = dc.tanh(x @ params["img_h1_w"] + params["img_h1_b"])
    x = dc.tanh(x @ params["img_h2_w"] + params["img_h2_b"])
    x = dc.l2_normalize(x @ params["img_proj"])
    return dc.reshape(x, (c.embed_dim,)) if single else x


def _bag_matrix(batch, vocab_size):
    m = np.zeros((len(batch), vocab_size))
    for row, ids in enumerate(batch):
        if len(ids) == 0:
            raise ValueError("cannot encode an empty token sequence")
        for i in ids:
            m[row, i] += 1.0 / len(ids)
    return m


def encode_text(params, tokens):
    """Unit-norm embedding for one token-id sequence, or a batch of them."""
    single = len(tokens) == 0 or np.isscalar(tokens[0])
    batch = [list(tokens)] if single else [list(t) for t in tokens]
    x = dc.Tensor(_bag_matrix(batch, params.vocab_size)) @ params["tok_emb"]
    x = dc.tanh(x @ params["txt_h_w"] + params["txt_h_b"])
    x = dc.l2_normalize(x @ params["txt_proj"])
    return dc.reshape(x, (params.config.embed_dim,)) if single else x


def embed_texts(params, vocabulary, texts):
    """Constant ``(N, D)`` array of text embeddings for strings."""
    ids = [vocabulary.encode(t) for t in texts]
    return encode_text(params.frozen(), ids).data


def similarity_logits(image_emb, text_embs, temperature):
    """``temperature * cos(image, text_i)`` for unit-norm embeddings."""
    if isinstance(text_embs, (list, tuple)):
        if not text_embs:
            raise ValueError("similarity_logits needs at least one text embedding")
        text_embs = np.stack([t.data if isinstance(t, dc.Tensor) else np.asarray(t) for t in text_embs])
    bank = dc.as_tensor(text_embs)
    if bank.ndim != 2 or bank.shape[0] == 0:
        raise dc.ShapeError(f"similarity_logits: text bank must be (K, D), got {bank.shape}")
    return dc.mul(dc.matmul(image_emb, dc.transpose(bank)), temperature)


# -- training -----------------------------------------------------------------

def training_texts(sample, class_vocab):
    """Texts an image may be paired with during training."""
    prompt = class_vocab.templates["classification"].format(sample.class_name)
    return list(sample.captions) + [prompt, class_vocab.context(sample.class_name)]


def zero_shot_accuracy(params, samples, class_vocab, vocabulary):
    prompts = [class_vocab.templates["classification"].format(c) for c in class_vocab.classes]
    bank = embed_texts(params, vocabulary, prompts)
    images = np.stack([s.image for s in samples])
    emb = encode_image(params.frozen(), images).data
    pred = np.argmax(emb @ bank.T, axis=1)
    return float(np.mean(pred == np.array([s.class_index for s in samples])))


def contrastive_loss(params, images, token_batch):
    """Symmetric in-batch cross-entropy; row i of images pairs with text i."""
    img = encode_image(params, images)
    txt = encode_text(params, token_batch)
    logits = dc.mul(img @ dc.transpose(txt), params["temperature"])
    labels = np.arange(len(token_batch))
    return dc.scale(
        dc.add(dc.softmax_cross_entropy(logits, labels), dc.softmax_cross_entropy(dc.transpose(logits), labels)),
        0.5,
    )


def contrastive_train(params, dataset, epochs=100, batch=16, lr=0.1, seed=42, schedule="cosine",
                      adv_epsilon=4 / 255):
    """Plain SGD (no momentum) on the symmetric in-batch image/text cross-entropy.

    ``schedule`` is ``"constant"`` or ``"cosine"`` (per-epoch cosine decay to 0).
    With ``adv_epsilon > 0`` each step averages the clean loss with the loss on
    a one-step sign-gradient perturbation of the batch images, its radius
    ramped linearly from 0 to ``adv_epsilon`` over the first half of training.
    Returns the trained parameters and a per-epoch record of mean loss and
    validation zero-shot accuracy.
    """
    if batch < 2:
        raise ValueError("batch must be >= 2")
    if schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown learning-rate schedule {schedule!r}")
    vocab = dataset.vocabulary
    cv = dataset.class_vocab
    train = dataset.train
    val = dataset.val
    p = params.trainable()
    pool = [[vocab.encode(t) for t in training_texts(s, cv)] for s in train]
    images = np.stack([s.image for s in train])
    curve = []
    step = 0
    for epoch in range(epochs):
        rng = rng_for(seed, "train", epoch)
        rate = lr if schedule == "constant" else 0.5 * lr * (1.0 + np.cos(np.pi * epoch / epochs))
        order = rng.permutation(len(train))
        eps = adv_epsilon * min(1.0, 2.0 * epoch / epochs)
        choice = rng.integers(0, len(pool[0]), size=len(train))
        losses = []
        for start in range(0, len(order) - batch + 1, batch):
            idx = order[start:start + batch]
            batch_img = images[idx]
            tokens = [pool[i][choice[i]] for i in idx]
            loss = contrastive_loss(p, batch_img, tokens)
            if eps > 0:
                _, g = dc.grad(lambda x: contrastive_loss(p.frozen(), x, tokens), batch_img)
                adv_img = np.clip(batch_img + eps * np.sign(g), 0.0, 1.0)
                loss = dc.scale(dc.add(loss, contrastive_loss(p, adv_img, tokens)), 0.5)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(step)
            grads = dc.backward(loss)
            for t, g in grads.items():
                t.data = t.data - rate * g
            t = p["temperature"]
            t.data = np.clip(t.data, *TEMPERATURE_RANGE)
            losses.append(loss.item())
            step += 1
        acc = zero_shot_accuracy(p, val, cv, vocab) if val else float("nan")
        curve.append({"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else float("nan"), "val_accuracy": acc})
        log.info("epoch %d loss %.4f val acc %.3f", epoch + 1, curve[-1]["loss"], acc)
    return p.frozen(), curve


# -- checkpoint file ----------------------------------------------------------

CKPT_MAGIC = b"VLWB"
CKPT_VERSION = 1


def _write_tensor(f, name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def write_tensors(path, named):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        for name, arr in named.items():
            _write_tensor(f, name, arr)


def read_tensors(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, {}
    while pos < len(raw):
        (n,) = struct.unpack_from("<I", raw, pos)
        name = raw[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (rank,) = struct.unpack_from("<I", raw, pos)
        dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
        pos += 4 + 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    return out


def save_params(path, params):
    named = dict(params.arrays())
    cfg = asdict(params.config)
    for key, value in cfg.items():
        named[f"config.{key}"] = np.array(value, dtype=np.float64)
    write_tensors(path, named)


def load_params(path):
    named = read_tensors(path)
    cfg = {k.split(".", 1)[1]: v for k, v in named.items() if k.startswith("config.")}
    kwargs = {}
    for f, v in cfg.items():
        kwargs[f] = float(v) if f == "init_temperature" else int(v)
    config = ModelConfig(**kwargs)
    tensors = {k: dc.Tensor(named[k]) for k in EncoderParams.names}
    return EncoderParams(config, tensors["tok_emb"].shape[0], tensors)
