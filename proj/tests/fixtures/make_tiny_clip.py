"""Regenerates the tiny CLIP text checkpoint and reference outputs used by the C++ tests.

Run from the repository root: python3 tests/fixtures/make_tiny_clip.py
"""
import json
import os
from collections import Counter

import torch
from transformers import CLIPTextConfig, CLIPTextModelWithProjection, CLIPTokenizer

OUT = os.path.join(os.path.dirname(__file__), "tiny_clip")
CORPUS = """a photo of a dog domestic dog house dog pet dog pooch puppy family dog canine companion
dog breed working dog guard dog guide dog service dog show dog mongrel hound wolf coyote jackal fox
dingo dhole raccoon dog hyena domestic cat pig ferret monkey goat sheep cat horse mare stallion don't
it's 1999 café"""


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def learn_merges(words, n_merges):
    enc = bytes_to_unicode()
    seqs = Counter()
    for w in words:
        sym = [enc[b] for b in w.encode("utf-8")]
        sym[-1] += "</w>"
        seqs[tuple(sym)] += 1
    merges = []
    for _ in range(n_merges):
        pairs = Counter()
        for s, c in seqs.items():
            for a, b in zip(s, s[1:]):
                pairs[(a, b)] += c
        if not pairs:
            break
        best = max(pairs.items(), key=lambda kv: (kv[1], kv[0]))[0]
        merges.append(best)
        new = Counter()
        for s, c in seqs.items():
            out, i = [], 0
            while i < len(s):
                if i + 1 < len(s) and (s[i], s[i + 1]) == best:
                    out.append(s[i] + s[i + 1])
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            new[tuple(out)] += c
        seqs = new
    return merges


def main():
    os.makedirs(OUT, exist_ok=True)
    words = [w.lower() for w in CORPUS.replace("'", " ").split()]
    merges = learn_merges(words, 120)
    base = list(bytes_to_unicode().values())
    vocab_list = base + [b + "</w>" for b in base] + ["".join(m) for m in merges]
    vocab_list += ["<|startoftext|>", "<|endoftext|>"]
    vocab = {}
    for t in vocab_list:
        vocab.setdefault(t, len(vocab))
    with open(os.path.join(OUT, "vocab.json"), "w") as f:
        json.dump(vocab, f, ensure_ascii=False)
    with open(os.path.join(OUT, "merges.txt"), "w") as f:
        f.write("#version: 0.2\n")
        for a, b in merges:
            f.write(f"{a} {b}\n")
    with open(os.path.join(OUT, "tokenizer_config.json"), "w") as f:
        json.dump({"pad_token": "<|endoftext|>", "model_max_length": 16}, f)

    tok = CLIPTokenizer(os.path.join(OUT, "vocab.json"), os.path.join(OUT, "merges.txt"))
    torch.manual_seed(0)
    cfg = CLIPTextConfig(
        vocab_size=len(vocab), hidden_size=32, intermediate_size=64, num_attention_heads=4,
        num_hidden_layers=2, max_position_embeddings=16, projection_dim=24, hidden_act="quick_gelu",
        bos_token_id=vocab["<|startoftext|>"], eos_token_id=vocab["<|endoftext|>"],
        pad_token_id=vocab["<|endoftext|>"],
    )
    model = CLIPTextModelWithProjection(cfg).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    model.save_pretrained(OUT, safe_serialization=True)

    texts = ["dog", "domestic dog", "Guide  Dog", "raccoon dog", "cat", "don't stop", "1999 café",
             "a photo of a dog"]
    cases = []
    for t in texts:
        ids = tok(t)["input_ids"]
        x = torch.tensor([ids])
        with torch.no_grad():
            out = model(input_ids=x, output_hidden_states=False)
            hidden = model.text_model(input_ids=x).last_hidden_state[0]
        eos = hidden[len(ids) - 1]
        proj = out.text_embeds[0]
        mean = hidden.mean(0)
        n = lambda v: (v / v.norm()).double().tolist()
        cases.append({"text": t, "ids": ids, "eos": n(eos), "eos_projected": n(proj), "mean": n(mean)})

    padded = tok("pet dog", padding="max_length", max_length=16)["input_ids"]
    with torch.no_grad():
        seq = model.text_model(input_ids=torch.tensor([padded])).last_hidden_state[0].double().tolist()
    with open(os.path.join(OUT, "expected.json"), "w") as f:
        json.dump({"cases": cases, "sequence": {"text": "pet dog", "ids": padded, "hidden": seq}}, f)


if __name__ == "__main__":
    main()
