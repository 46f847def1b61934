#!/usr/bin/env python3
"""Cross-check attnscope against a float64 Hugging Face BertModel.

Builds a small randomly initialised BertModel, exports it, runs
`attnscope extract`, then compares attention maps with the model's own
attentions and contribution matrices with Jacobians from torch.autograd.

    python3 tools/reference_check.py --cli build/tools/attnscope --work /tmp/ref
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch
from transformers import BertConfig, BertModel

sys.path.insert(0, str(Path(__file__).resolve().parent))
from export_bert import export, read_hta  # noqa: E402

ATTN_TOL = 1e-10
CONTRIB_TOL = 1e-9


def build_model(act):
    torch.manual_seed(7)
    cfg = BertConfig(vocab_size=40, hidden_size=16, num_hidden_layers=3,
                     num_attention_heads=2, intermediate_size=32,
                     max_position_embeddings=24, type_vocab_size=2,
                     hidden_act=act, hidden_dropout_prob=0.0,
                     attention_probs_dropout_prob=0.0, initializer_range=0.3)
    cfg._attn_implementation = "eager"
    model = BertModel(cfg, add_pooling_layer=False)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias") or "LayerNorm" in name:
                p.add_(0.1 * torch.randn_like(p))
    return model.double().eval()


def contributions(jac):
    """jac: (L, d_out, L, d_in) -> row j = normalized block norms over i."""
    norms = np.sqrt((jac ** 2).sum(axis=(1, 3)))
    return norms / norms.sum(axis=1, keepdims=True)


def call_layer(layer, x):
    out = layer(x)
    return out[0] if isinstance(out, tuple) else out


def run_layers(model, x):
    """Steps through the encoder layers from `x` (batch of one) and returns
    the per-layer concatenated head outputs (before the output projection)
    and layer outputs, both without the batch axis."""
    heads, hidden = [], []
    for layer in model.encoder.layer:
        hook = layer.attention.self.register_forward_hook(
            lambda m, i, o: heads.append(o[0][0]))
        try:
            x = call_layer(layer, x)
        finally:
            hook.remove()
        hidden.append(x[0])
    return heads, hidden


def reference(model, ids, seg):
    cfg = model.config
    L, H = len(ids), cfg.num_attention_heads
    dh = cfg.hidden_size // H
    ids_t = torch.tensor([ids])
    seg_t = torch.tensor([seg])
    emb = model.embeddings
    pos = torch.arange(L).unsqueeze(0)
    e0 = (emb.word_embeddings(ids_t) + emb.position_embeddings(pos)
          + emb.token_type_embeddings(seg_t)).detach()
    with torch.no_grad():
        attentions = model(ids_t, token_type_ids=seg_t, output_attentions=True).attentions
    layers = list(range(cfg.num_hidden_layers))

    def from_e0(x):
        heads, hidden = run_layers(model, emb.LayerNorm(x))
        return tuple(heads) + tuple(hidden)

    jac = torch.autograd.functional.jacobian(from_e0, e0)
    with torch.no_grad():
        _, hidden = run_layers(model, emb.LayerNorm(e0))
    inputs = [emb.LayerNorm(e0).detach()] + [h.unsqueeze(0) for h in hidden]
    ref = {}
    for l in layers:
        ref[("attention", l)] = attentions[l][0].numpy()
        full = jac[l][:, :, 0].numpy()  # (L, H*dh, L, d_e)
        ref[("input", l)] = [contributions(full[:, h * dh:(h + 1) * dh]) for h in range(H)]
        ref[("hidden", l)] = contributions(jac[len(layers) + l][:, :, 0].numpy())

        def local(x, l=l):
            out = []
            h = model.encoder.layer[l].attention.self.register_forward_hook(
                lambda m, i, o: out.append(o[0][0]))
            try:
                call_layer(model.encoder.layer[l], x)
            finally:
                h.remove()
            return out[0]

        lj = torch.autograd.functional.jacobian(local, inputs[l])[:, :, 0].numpy()
        ref[("prev", l)] = [contributions(lj[:, h * dh:(h + 1) * dh]) for h in range(H)]
    return ref


def run(cli, work, act):
    work = Path(work) / act
    model = build_model(act)
    export(model, work / "model", dtype="f64", special_token_ids=(1, 2))
    rng = np.random.default_rng(3)
    seqs = []
    for s, L in enumerate([1, 2, 5, 9, 17]):
        ids = [int(v) for v in rng.integers(3, 40, size=L)]
        seg = [0 if i < L // 2 else 1 for i in range(L)]
        seqs.append({"id": f"r{s}", "token_ids": ids, "segment_ids": seg})
    with open(work / "model" / "data.jsonl", "w") as f:
        for s in seqs:
            f.write(json.dumps(s) + "\n")
    m = work / "model"
    subprocess.run([cli, "extract", "--config", m / "config.json", "--weights", m / "weights.hta",
                    "--data", m / "data.jsonl", "--out", work / "out", "--allow-nonidentifiable",
                    "--kind", "attention,prev-contribution,input-contribution,hidden-contribution"],
                   check=True, stdout=subprocess.DEVNULL)

    worst = {"attention": 0.0, "input": 0.0, "prev": 0.0, "hidden": 0.0}
    H = model.config.num_attention_heads
    for s in seqs:
        ref = reference(model, s["token_ids"], s["segment_ids"])
        d = work / "out" / s["id"]
        for l in range(model.config.num_hidden_layers):
            for h in range(H):
                tag = f"_l{l + 1}_h{h}.hta"
                pairs = [("attention", ref[("attention", l)][h], "attention" + tag),
                         ("input", ref[("input", l)][h], "input-contribution" + tag),
                         ("prev", ref[("prev", l)][h], "prev-contribution" + tag)]
                for key, expect, name in pairs:
                    got = read_hta(d / name)["values"]
                    worst[key] = max(worst[key], float(np.abs(got - expect).max()))
            got = read_hta(d / f"hidden-contribution_l{l + 1}.hta")["values"]
            worst["hidden"] = max(worst["hidden"], float(np.abs(got - ref[("hidden", l)]).max()))
    ok = worst["attention"] <= ATTN_TOL and all(
        worst[k] <= CONTRIB_TOL for k in ("input", "prev", "hidden"))
    print(f"{'PASS' if ok else 'FAIL'} {act}: " + ", ".join(
        f"{k} max diff {v:.3g}" for k, v in worst.items())
        + f" (limits {ATTN_TOL:g} attention, {CONTRIB_TOL:g} contributions)")
    return ok


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cli", required=True)
    p.add_argument("--work", required=True, type=Path)
    args = p.parse_args()
    torch.set_default_dtype(torch.float64)
    results = [run(args.cli, args.work, act) for act in ("gelu", "gelu_new")]
    sys.exit(0 if all(results) else 1)


if __name__ == "__main__":
    main()
