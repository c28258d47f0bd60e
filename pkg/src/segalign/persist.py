"""Checkpoint wrappers for the package's concrete models."""

from __future__ import annotations

import json
from pathlib import Path

import torch

from . import checkpoint
from .decomposition import CommonDirection
from .diffusion import Denoiser
from .encoders import DTYPE, ImageEncoder, TextEncoder
from .preference import PreferenceModel
from .segmentation import SegmentationPolicy, Vocabulary


def save_preference_model(path, m: PreferenceModel) -> None:
    state = {f"text.{k}": v for k, v in m.text.state_dict().items()}
    state |= {f"image.{k}": v for k, v in m.image.state_dict().items()}
    manifest = {
        "kind": "preference",
        "vocab_size": m.vocab.size,
        "d": m.text.d,
        "d_e": m.text.d_e,
        "l_seg": m.text.l_seg,
        "n_layers": len(m.text.blocks),
        "image_size": m.image.image_size,
        "image_width": m.image.position_embedding.shape[1],
        "tau": m.tau,
    }
    checkpoint.save_state(path, state, manifest)


def load_preference_model(path, vocab: Vocabulary) -> PreferenceModel:
    state, man = checkpoint.load_state(path)
    if man.get("kind") != "preference":
        raise checkpoint.IncompatibleCheckpointError(
            f"expected a preference checkpoint, got kind={man.get('kind')!r}"
        )
    text = TextEncoder(
        man["vocab_size"],
        d=man["d"],
        d_e=man["d_e"],
        l_seg=man["l_seg"],
        n_layers=man["n_layers"],
    )
    image = ImageEncoder(
        image_size=man["image_size"], width=man["image_width"], d_e=man["d_e"]
    )
    text.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("text.")})
    image.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("image.")})
    return PreferenceModel(
        text=text,
        image=image,
        vocab=vocab,
        policy=SegmentationPolicy(l_seg=man["l_seg"]),
        tau=man["tau"],
    )


def save_text_encoder(path, enc: TextEncoder, vocab_size: int) -> None:
    checkpoint.save_module(
        path,
        enc,
        {
            "kind": "text_encoder",
            "vocab_size": vocab_size,
            "d": enc.d,
            "d_e": enc.d_e,
            "l_seg": enc.l_seg,
            "n_layers": len(enc.blocks),
        },
    )


def load_text_encoder(path) -> TextEncoder:
    state, man = checkpoint.load_state(path)
    enc = TextEncoder(
        man["vocab_size"],
        d=man["d"],
        d_e=man["d_e"],
        l_seg=man["l_seg"],
        n_layers=man["n_layers"],
    )
    enc.load_state_dict(state)
    return enc


def save_denoiser(path, model: Denoiser) -> None:
    d_cond = model.attn.k.in_features
    checkpoint.save_module(
        path,
        model,
        {
            "kind": "denoiser",
            "image_size": model.image_size,
            "channels": model.channels,
            "width": model.conv_in.out_channels,
            "d_cond": d_cond,
            "T": model.T,
            "time_dim": model.time_dim,
        },
    )


def load_denoiser(path) -> tuple[Denoiser, dict]:
    state, man = checkpoint.load_state(path)
    model = Denoiser(
        image_size=man["image_size"],
        channels=man["channels"],
        width=man["width"],
        d_cond=man["d_cond"],
        T=man["T"],
        time_dim=man["time_dim"],
    )
    model.load_state_dict(state)
    return model, man


def save_direction(path, dir: CommonDirection) -> None:
    Path(path).write_text(
        json.dumps(
            {
                "V": dir.V.tolist(),
                "corpus_size": dir.corpus_size,
                "encoder_version": dir.encoder_version,
            }
        )
    )


def load_direction(path) -> CommonDirection:
    obj = json.loads(Path(path).read_text())
    return CommonDirection(
        V=torch.tensor(obj["V"], dtype=DTYPE),
        corpus_size=obj["corpus_size"],
        encoder_version=obj["encoder_version"],
    )
