"""Generates the bundled replay fixture.

Writes three files next to this script:

  replay.ndjson          line-delimited JSON trace
  replay.lscd            the same trace in the binary encoding
  replay.expected.json   outcomes under default decoding, computed here
                         with a direct stencil convolution and a plain
                         top-k / nucleus remap

Run: python3 make_replay.py
"""

import json
import math
import struct
from pathlib import Path

HERE = Path(__file__).resolve().parent

NUM_LAYERS = 32
EXPORTED = list(range(8, 29))
HEADS = 2
GRID = (2, 2)
N_VISUAL = GRID[0] * GRID[1]
N_TEXT = 3
IDS = [5, 17, 42, 99]
WATCH = [5, 17]
ALPHA, BETA, TOP_K, TOP_P = 0.1, 0.0, 10, 0.9


def f32(x):
    return struct.unpack("<f", struct.pack("<f", x))[0]


def attention_row(layer, step, head):
    # Spiky map at the step's peak layer, a faint flat map at one layer,
    # mildly uneven maps elsewhere.
    peak = {0: 14, 1: 20, 2: 11}[step]
    if layer == peak:
        return [0.6, 0.0, 0.0, 0.05] if head == 0 else [0.5, 0.02, 0.0, 0.1]
    if layer == 26:
        return [0.02, 0.02, 0.02, 0.02]
    k = (layer + step + head) % 5
    return [0.10 + 0.01 * k, 0.10, 0.12, 0.10 - 0.005 * k]


def text_row(layer, head):
    return [0.05, 0.1 + 0.002 * (layer % 4), 0.05 + 0.01 * head]


FINAL = {
    0: [2.0, 1.9, 0.5, -1.0],
    1: [3.0, 1.0, 0.0, -1.0],
    2: [1.0, 1.2, 0.2, 0.0],
}

PEAK_LOGITS = {
    0: [8.0, 0.0, 0.0, 0.0],
    1: [1.0, 2.0, 0.0, 0.0],
    2: [0.0, 9.0, 0.0, 0.0],
}


def layer_logits(layer, step):
    peak = {0: 14, 1: 20, 2: 11}[step]
    if layer == peak:
        return PEAK_LOGITS[step]
    return [0.5 + 0.05 * ((layer + step) % 3), 0.25, -0.5, 0.0]


def pi_max(layer):
    return round(0.3 + 0.02 * (layer - 8), 4)


def build():
    manifest = {
        "format_version": 1,
        "model_id": "replay-fixture",
        "num_layers": NUM_LAYERS,
        "heads": HEADS,
        "n_visual": N_VISUAL,
        "grid": list(GRID),
        "n_text": N_TEXT,
        "vocab_size": 128,
        "exported_layers": EXPORTED,
        "candidate_token_count": len(IDS),
        "step_count": 3,
        "visual_token_span": [3, 3 + N_VISUAL],
        "has_text_slice": True,
        "token_strings": {"5": "Yes", "17": "No", "42": "Maybe", "99": "."},
        "watch_token_ids": WATCH,
    }
    steps = []
    for s in range(3):
        final = FINAL[s]
        steps.append(
            {
                "step_index": s,
                "attention": [[attention_row(l, s, h) for h in range(HEADS)] for l in EXPORTED],
                "text_attention": [[text_row(l, h) for h in range(HEADS)] for l in EXPORTED],
                "token_ids": IDS,
                "final_logits": final,
                "layer_logits": [layer_logits(l, s) for l in EXPORTED],
                "layer_pi_max": [pi_max(l) for l in EXPORTED],
                "model_greedy_token": IDS[max(range(len(IDS)), key=lambda i: (final[i], -i))],
            }
        )
    return manifest, steps


def write_binary(manifest, steps, path):
    out = bytearray()
    blob = json.dumps(manifest, separators=(",", ":")).encode()
    out += b"LSCD" + struct.pack("<I", 1) + struct.pack("<Q", len(blob)) + blob

    def floats(vs):
        return b"".join(struct.pack("<f", v) for v in vs)

    for st in steps:
        out += struct.pack("<I", st["step_index"])
        for layer in st["attention"]:
            out += floats(v for head in layer for v in head)
        for layer in st["text_attention"]:
            out += floats(v for head in layer for v in head)
        out += struct.pack("<I", len(st["token_ids"]))
        out += b"".join(struct.pack("<I", t) for t in st["token_ids"])
        out += floats(st["final_logits"])
        for row in st["layer_logits"]:
            out += floats(row)
        out += floats(st["layer_pi_max"])
        out += struct.pack("<I", st["model_greedy_token"])
    path.write_bytes(bytes(out))


# Oracle: zero-padded 5-point stencil, energy = mean over heads of the
# Frobenius norm of the response.
def energy(layer_heads):
    rows, cols = GRID
    total = 0.0
    for head in layer_heads:
        a = [[f32(head[r * cols + c]) for c in range(cols)] for r in range(rows)]

        def at(r, c):
            return a[r][c] if 0 <= r < rows and 0 <= c < cols else 0.0

        sq = 0.0
        for r in range(rows):
            for c in range(cols):
                resp = at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4 * at(r, c)
                sq += resp * resp
        total += math.sqrt(sq)
    return total / len(layer_heads)


def softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def remap_choice(final, peak, gt, pi_gt):
    final = [f32(v) for v in final]
    peak = [f32(v) for v in peak]
    gt = [f32(v) for v in gt]
    beta_eff = BETA * pi_gt
    composed = [(1 + ALPHA) * z - ALPHA * p + beta_eff * g for z, p, g in zip(final, peak, gt)]
    probs = softmax(final)
    order = sorted(range(len(final)), key=lambda i: (-final[i], IDS[i]))[:TOP_K]
    mask, cum = [], 0.0
    for i in order:
        mask.append(i)
        cum += probs[i]
        if cum >= TOP_P - 1e-12:
            break
    best = min(mask, key=lambda i: (-composed[i], IDS[i]))
    return IDS[best]


def expected(steps):
    out = {"tokens": [], "baseline_tokens": [], "peak_layers": [], "gt_layers": []}
    for st in steps:
        energies = [energy(st["attention"][i]) for i in range(len(EXPORTED))]
        peak_i = max(range(len(EXPORTED)), key=lambda i: (energies[i], -i))
        gt_i = min(range(len(EXPORTED)), key=lambda i: (energies[i], i))
        final = st["final_logits"]
        baseline = IDS[max(range(len(IDS)), key=lambda i: (f32(final[i]), -IDS[i]))]
        chosen = remap_choice(
            final,
            st["layer_logits"][peak_i],
            st["layer_logits"][gt_i],
            f32(st["layer_pi_max"][gt_i]),
        )
        out["tokens"].append(chosen)
        out["baseline_tokens"].append(baseline)
        out["peak_layers"].append(EXPORTED[peak_i])
        out["gt_layers"].append(EXPORTED[gt_i])
    out["divergence_steps"] = [i for i, (a, b) in enumerate(zip(out["tokens"], out["baseline_tokens"])) if a != b]
    return out


def main():
    manifest, steps = build()
    lines = [json.dumps(manifest, separators=(",", ":"))]
    lines += [json.dumps(s, separators=(",", ":")) for s in steps]
    (HERE / "replay.ndjson").write_text("\n".join(lines) + "\n")
    write_binary(manifest, steps, HERE / "replay.lscd")
    (HERE / "replay.expected.json").write_text(json.dumps(expected(steps), indent=2) + "\n")


if __name__ == "__main__":
    main()
