#!/usr/bin/env python3
"""Convert a Hugging Face BertModel to an attnscope config.json + weights.hta,
and optionally tokenize MNLI sentence pairs into data.jsonl.

    python3 tools/export_bert.py --model bert-base-uncased --out bert/
    python3 tools/export_bert.py --model bert-base-uncased --out bert/ \
        --mnli glue/MNLI/dev_matched.tsv --limit 200 --max-len 64
"""

import argparse
import csv
import json
import struct
import sys
from pathlib import Path

import numpy as np

MAGIC = b"HTA1"


def write_hta(path, tensors, dtype="f32"):
    """Writes name -> ndarray in name order, matching the C++ writer."""
    np_dtype = {"f32": "<f4", "f64": "<f8"}[dtype]
    header, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype=np_dtype).tobytes()
        header[name] = {"dtype": dtype, "shape": list(np.shape(tensors[name])),
                        "offset": offset, "nbytes": len(data)}
        chunks.append(data)
        offset += len(data)
    head = json.dumps(header, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<Q", len(head)) + head)
        for c in chunks:
            f.write(c)


def read_hta(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: missing HTA1 magic")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    base = 12 + n
    out = {}
    for name, e in header.items():
        dt = {"f32": "<f4", "f64": "<f8"}[e["dtype"]]
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        out[name] = np.frombuffer(buf, dtype=dt).astype(np.float64).reshape(e["shape"])
    return out


def convert(model, special_token_ids=(101, 102)):
    """Returns (config dict, tensor dict) for a transformers BertModel."""
    hf = model.config
    n_heads = hf.num_attention_heads
    d_head = hf.hidden_size // n_heads
    act = {"gelu": "exact-gelu", "gelu_new": "tanh-gelu",
           "gelu_pytorch_tanh": "tanh-gelu"}.get(hf.hidden_act)
    if act is None:
        raise ValueError(f"unsupported activation {hf.hidden_act!r}")
    config = {
        "n_layers": hf.num_hidden_layers, "n_heads": n_heads,
        "d_e": hf.hidden_size, "d_q": d_head, "d_v": d_head,
        "d_ff": hf.intermediate_size, "vocab_size": hf.vocab_size,
        "max_position": hf.max_position_embeddings,
        "type_vocab_size": hf.type_vocab_size, "ln_eps": hf.layer_norm_eps,
        "activation": act, "special_token_ids": list(special_token_ids),
    }
    sd = {k: v.detach().cpu().double().numpy() for k, v in model.state_dict().items()}
    t = {
        "embeddings.word": sd["embeddings.word_embeddings.weight"],
        "embeddings.position": sd["embeddings.position_embeddings.weight"],
        "embeddings.type": sd["embeddings.token_type_embeddings.weight"],
        "embeddings.ln.gamma": sd["embeddings.LayerNorm.weight"],
        "embeddings.ln.beta": sd["embeddings.LayerNorm.bias"],
    }
    # torch Linear stores (out, in); attnscope stores (in, out).
    linear = {
        "attn.q": "attention.self.query", "attn.k": "attention.self.key",
        "attn.v": "attention.self.value", "attn.out": "attention.output.dense",
        "mlp.fc1": "intermediate.dense", "mlp.fc2": "output.dense",
    }
    norms = {"attn.ln": "attention.output.LayerNorm", "mlp.ln": "output.LayerNorm"}
    for l in range(hf.num_hidden_layers):
        src, dst = f"encoder.layer.{l}.", f"layer.{l}."
        for ours, theirs in linear.items():
            t[dst + ours + ".weight"] = sd[src + theirs + ".weight"].T
            t[dst + ours + ".bias"] = sd[src + theirs + ".bias"]
        for ours, theirs in norms.items():
            t[dst + ours + ".gamma"] = sd[src + theirs + ".weight"]
            t[dst + ours + ".beta"] = sd[src + theirs + ".bias"]
    return config, t


def export(model, out, dtype="f32", special_token_ids=(101, 102)):
    config, tensors = convert(model, special_token_ids)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    write_hta(out / "weights.hta", tensors, dtype)
    return config


def tokenize_mnli(tokenizer, tsv, limit, max_len):
    rows = []
    with open(tsv, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f, delimiter="\t", quoting=csv.QUOTE_NONE):
            enc = tokenizer(rec["sentence1"], rec["sentence2"])
            ids = enc["input_ids"]
            if len(ids) > max_len:
                continue
            rows.append({
                "id": "mnli-" + str(rec.get("pairID") or rec.get("index") or len(rows)),
                "token_ids": ids,
                "segment_ids": enc["token_type_ids"],
                "tokens": tokenizer.convert_ids_to_tokens(ids),
            })
            if len(rows) >= limit:
                break
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", required=True, help="model name or local directory")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    p.add_argument("--mnli", type=Path, help="GLUE MNLI tsv to tokenize into data.jsonl")
    p.add_argument("--limit", type=int, default=200)
    p.add_argument("--max-len", type=int, default=64)
    args = p.parse_args(argv)

    from transformers import AutoTokenizer, BertModel

    model = BertModel.from_pretrained(args.model, attn_implementation="eager")
    tok = AutoTokenizer.from_pretrained(args.model)
    special = [i for i in (tok.cls_token_id, tok.sep_token_id) if i is not None]
    export(model, args.out, args.dtype, special)
    if args.mnli:
        rows = tokenize_mnli(tok, args.mnli, args.limit, args.max_len)
        with open(args.out / "data.jsonl", "w", encoding="utf-8") as f:
            for r in rows:
                f.write(json.dumps(r) + "\n")
        print(f"wrote {len(rows)} sequences", file=sys.stderr)
    print(f"wrote {args.out / 'config.json'} and {args.out / 'weights.hta'}", file=sys.stderr)


if __name__ == "__main__":
    main()
