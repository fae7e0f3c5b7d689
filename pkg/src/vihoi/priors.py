"""Prompt construction and layer-decoupled prior extraction.

E_v is the visual-token slice of one encoder layer (shallow by default) and
E_t is the slice covering only the embedded annotation, taken from a deeper
layer.
"""
from __future__ import annotations

import io
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import torch
from PIL import Image

from .errors import BadImageShape, LayerMissing, TokenizationMismatch

EXTRACTION_TEMPLATE = (
    "We are conducting the text-to-HOI motion generation task and the given textual description "
    "is: {text}. We want to extract motion priors from the following three reference images to "
    "facilitate the generation of Human-Object-Interaction motion. These priors include the human "
    "pose, the object's shape and size, and the contact region on the object during interaction, "
    "etc. The initial position of the object is in front of the person."
)

T2I_TEMPLATE = (
    "{text}. Please first divide the above-described interaction process into three stages, and "
    "ensure that there is contact between the character and the object in each stage. Then, "
    "synthesize one image for each of the three stages. You should ensure each image contains only "
    "one character and one object, and that the object's shape and size match those in the "
    "provided image. Moreover, both the background and the character should be realistic and "
    "consistent across the three generated images."
)

_TOKEN_RE = re.compile(r"[A-Za-z0-9]+|[^\sA-Za-z0-9]")


class Tokenizer:
    """Lower-cased word/punctuation tokenizer over a fixed vocabulary file."""

    def __init__(self, vocab: list[str] | None = None):
        if vocab is None:
            vocab = resources.files("vihoi.data").joinpath("vocab.txt").read_text().split("\n")
            vocab = [v for v in vocab if v]
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.unk = self.index["<unk>"]

    def __len__(self):
        return len(self.vocab)

    def encode(self, text: str):
        """(ids, char offsets) for every token of `text`."""
        ids, offsets = [], []
        for m in _TOKEN_RE.finditer(text):
            ids.append(self.index.get(m.group(0).lower(), self.unk))
            offsets.append((m.start(), m.end()))
        return ids, offsets

    def decode(self, ids) -> str:
        return " ".join(self.vocab[i] for i in ids)


_DEFAULT_TOKENIZER = None


def default_tokenizer() -> Tokenizer:
    global _DEFAULT_TOKENIZER
    if _DEFAULT_TOKENIZER is None:
        _DEFAULT_TOKENIZER = Tokenizer()
    return _DEFAULT_TOKENIZER


@dataclass(frozen=True)
class PromptBundle:
    tokens: tuple
    offsets: tuple
    text_span: tuple
    raw: str
    text: str
    char_span: tuple

    def detokenize(self, start: int, end: int) -> str:
        """Exact source substring covered by tokens[start:end]."""
        if start >= end:
            return ""
        return self.raw[self.offsets[start][0]: self.offsets[end - 1][1]]


def _clean(text: str) -> str:
    text = text.strip()
    if not text:
        raise ValueError("annotation text must be non-empty")
    return text


def build_extraction_prompt(text: str, tokenizer: Tokenizer | None = None) -> PromptBundle:
    tokenizer = tokenizer or default_tokenizer()
    text = _clean(text)
    prefix, suffix = EXTRACTION_TEMPLATE.split("{text}")
    raw = prefix + text + suffix
    c0, c1 = len(prefix), len(prefix) + len(text)
    ids, offsets = tokenizer.encode(raw)
    inside = [i for i, (a, b) in enumerate(offsets) if a >= c0 and b <= c1]
    straddle = [i for i, (a, b) in enumerate(offsets) if a < c1 and b > c0 and not (a >= c0 and b <= c1)]
    if not inside or straddle:
        raise TokenizationMismatch(f"annotation {text!r} does not align with token boundaries")
    span = (inside[0], inside[-1] + 1)
    bundle = PromptBundle(tuple(ids), tuple(offsets), span, raw, text, (c0, c1))
    if bundle.detokenize(*span) != text:
        raise TokenizationMismatch(f"span recovers {bundle.detokenize(*span)!r}, expected {text!r}")
    return bundle


def build_t2i_prompt(text: str) -> str:
    return T2I_TEMPLATE.replace("{text}", _clean(text))


# ---------------------------------------------------------------- images

def image_to_array(img: Image.Image, size: int = 224) -> np.ndarray:
    """RGB float32 in [0,1], bilinear-resized to size x size."""
    img = img.convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def load_image(path, size: int = 224) -> np.ndarray:
    with Image.open(path) as im:
        return image_to_array(im, size)


def array_to_png(arr: np.ndarray) -> bytes:
    a = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(a, "RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def png_to_array(data: bytes, size: int | None = None) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        if im.format != "PNG":
            raise BadImageShape(f"expected PNG, got {im.format}")
        if size is None:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return image_to_array(im, size)


# ---------------------------------------------------------------- extraction

@dataclass(frozen=True)
class ExtractionConfig:
    visual_layer: int = 3
    text_layer: int = 12
    text_only: bool = False

    def layers(self):
        return sorted({self.visual_layer, self.text_layer})

    def label(self) -> str:
        if self.text_only:
            return f"T{self.text_layer}-only"
        return f"V{self.visual_layer}-T{self.text_layer}"


@dataclass
class LayeredEmbeddings:
    states: dict
    visual_span: tuple
    text_span: tuple
    d_enc: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        (a0, a1), (b0, b1) = self.visual_span, self.text_span
        if not (a1 <= b0 or b1 <= a0):
            raise ValueError("visual and text spans overlap")
        lengths = {v.shape[0] for v in self.states.values()}
        if len(lengths) > 1:
            raise ValueError("layer states disagree on sequence length")


def check_images(images, size: int, n: int = 3) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float32)
    if arr.shape != (n, size, size, 3):
        raise BadImageShape(f"expected {n} images of shape ({size}, {size}, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise BadImageShape("image values must lie in [0, 1]")
    return arr


def encode(images, prompt: PromptBundle, encoder, layers=(3, 12)) -> LayeredEmbeddings:
    """Run the encoder on [visual patches | prompt tokens]; keep only the requested layers."""
    if hasattr(encoder, "encode_remote"):
        return encoder.encode_remote(images, prompt, layers)
    cfg = encoder.cfg
    arr = check_images(images, cfg.image_size, cfg.n_images)
    with torch.no_grad():
        states = encoder(torch.from_numpy(arr)[None], torch.as_tensor(prompt.tokens)[None], layers)
    n_vis = cfg.n_images * cfg.patches_per_image
    t0, t1 = prompt.text_span
    return LayeredEmbeddings(
        states={l: s[0].numpy() for l, s in states.items()},
        visual_span=(0, n_vis),
        text_span=(n_vis + t0, n_vis + t1),
        d_enc=cfg.d_enc,
    )


def extract_priors(emb: LayeredEmbeddings, cfg: ExtractionConfig = ExtractionConfig()):
    """(E_v, E_t); E_v is a single zero row when cfg.text_only is set."""
    for l in ([] if cfg.text_only else [cfg.visual_layer]) + [cfg.text_layer]:
        if l not in emb.states:
            raise LayerMissing(l)
    t0, t1 = emb.text_span
    e_t = np.asarray(emb.states[cfg.text_layer][t0:t1], dtype=np.float32)
    if cfg.text_only:
        return np.zeros((1, emb.d_enc), dtype=np.float32), e_t
    v0, v1 = emb.visual_span
    return np.asarray(emb.states[cfg.visual_layer][v0:v1], dtype=np.float32), e_t


def clip_text_prior(text: str, text_encoder, tokenizer: Tokenizer | None = None) -> np.ndarray:
    """E_t from the separate text-only encoder (annotation alone, no template)."""
    tokenizer = tokenizer or default_tokenizer()
    ids, _ = tokenizer.encode(_clean(text))
    return text_encoder.encode_ids(ids)


class LayerCache:
    """Wraps an encoder so each (images, prompt) runs once for a fixed set of layers.

    Used when several extraction configs share one frozen encoder: every request
    is served from the cached states of `layers`.
    """

    def __init__(self, encoder, layers):
        self.encoder = encoder
        self.layers = sorted(set(int(l) for l in layers))
        self._cache = {}

    @property
    def d_enc(self):
        if hasattr(self.encoder, "d_enc"):
            return self.encoder.d_enc
        return self.encoder.info()["d_enc"]

    def checksum(self):
        return self.encoder.checksum()

    def encode_remote(self, images, prompt: PromptBundle, layers) -> LayeredEmbeddings:
        missing = [l for l in layers if int(l) not in self.layers]
        if missing:
            raise LayerMissing(missing[0])
        arr = np.asarray(images, dtype=np.float32)
        key = (arr.tobytes(), prompt.raw)
        if key not in self._cache:
            self._cache[key] = encode(arr, prompt, self.encoder, self.layers)
        full = self._cache[key]
        return LayeredEmbeddings({int(l): full.states[int(l)] for l in layers}, full.visual_span,
                                 full.text_span, full.d_enc)
