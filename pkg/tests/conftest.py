import numpy as np
import pytest
import torch

from pfadapt.corpus import CorpusSpec, Example, SamplerConfig, Vocabulary, build_corpus, identity_language, make_batches
from pfadapt.evaluate import token_accuracy
from pfadapt.model import ModelConfig, forward, init_params
from pfadapt.numcore import Adam, LrSchedule, backprop
from pfadapt.pipeline import (
    EpochPlan,
    TrainSettings,
    adapt_sequence,
    base_prune_retrain,
    new_state,
    sequence_loss,
    train_multilingual,
)

N_CONTENT = 20


def copy_examples(n, seed, min_len=3, max_len=8):
    """Copy language: control token then content, target is the content."""
    vocab = Vocabulary(["cp"], N_CONTENT)
    lang = identity_language("cp", N_CONTENT)
    g = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = g.integers(0, N_CONTENT, size=int(g.integers(min_len, max_len + 1))).tolist()
        out.append(Example([vocab.control_id("cp")] + vocab.content_ids(s, "en"), vocab.content_ids(lang.render(s), "cp"), "en-xx"))
    return vocab, out


def train_steps(w, cfg, data, steps, lr=3e-3, warmup=50, seed=0, max_tokens=400):
    opt = Adam(LrSchedule(lr, warmup))
    drop = torch.Generator().manual_seed(seed)
    for v in w.values():
        v.requires_grad_(True)
    losses = []
    done = 0
    epoch = 0
    while done < steps:
        for b in make_batches([data], SamplerConfig(1.0, max_tokens, seed), len(data), stream=epoch):
            logits = forward(w, cfg, torch.from_numpy(b.src), torch.from_numpy(b.tgt_in), True, drop)
            loss = sequence_loss(logits, torch.from_numpy(b.tgt_out))
            opt.step(w, backprop(loss, w))
            losses.append(float(loss.detach()))
            done += 1
            if done == steps:
                break
        epoch += 1
    for v in w.values():
        v.requires_grad_(False)
    return losses


@pytest.fixture(scope="session")
def copy_model():
    vocab, train = copy_examples(500, seed=1)
    _, dev = copy_examples(100, seed=2)
    cfg = ModelConfig(vocab_size=vocab.size, num_heads=4, num_encoder_layers=2, num_decoder_layers=2, embed_dim=64, ffn_dim=128, dropout=0.0)
    w = init_params(cfg, torch.Generator().manual_seed(0)).tensors()
    acc = 0.0
    for _ in range(20):
        train_steps(w, cfg, train, 100)
        acc = token_accuracy(w, cfg, dev)
        if acc >= 0.99:
            break
    return {"w": w, "cfg": cfg, "vocab": vocab, "train": train, "dev": dev, "acc": acc}


TINY_SPEC = CorpusSpec(languages=("aa", "bb", "cc"), sizes=(60, 40, 20), dev_size=10, test_size=10, zero_shot_size=5, seed=3)
TINY_MODEL = ModelConfig(vocab_size=1, num_heads=2, num_encoder_layers=1, num_decoder_layers=1, embed_dim=16, ffn_dim=32)
TINY_SETTINGS = TrainSettings(lr_max=3e-3, warmup_steps=10)


def tiny_state(seed=0):
    return new_state(TINY_MODEL, TINY_SPEC, TINY_SETTINGS, seed)


@pytest.fixture(scope="session")
def tiny_run():
    """parent -> pruned -> one checkpoint after each adapted pair."""
    corpus = build_corpus(TINY_SPEC)
    parent = train_multilingual(tiny_state(), corpus, 3)
    pruned = base_prune_retrain(parent.clone(), corpus, 0.5, 2)
    snaps = []
    state = pruned.clone()
    adapt_sequence(state, corpus, ["aa", "bb", "cc"], [0.75] * 3, EpochPlan(0, 0, 2, 1), lambda s, p: snaps.append(s.clone()))
    return {"corpus": corpus, "parent": parent, "pruned": pruned, "after": snaps, "final": state}
