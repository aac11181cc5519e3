"""Regenerates the golden files under tests/data from first principles.

Run from crates/core: python3 tests/oracles/gen_golden.py
Needs mpmath.
"""

import struct
from pathlib import Path

import mpmath

M64 = (1 << 64) - 1
DATA = Path(__file__).resolve().parent.parent / "data"


def mix64(x):
    z = (x + 0x9E3779B97F4A7C15) & M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


def mix_words(key, words):
    s = mix64(key)
    for w in words:
        s = mix64(s ^ w)
    return s


def label_hash(label):
    h = 0xCBF29CE484222325
    for b in label.encode():
        h = ((h ^ b) * 0x00000100000001B3) & M64
    return h


def seed_step(seed, label, index):
    return mix64(mix64(seed ^ label_hash(label)) ^ index)


def derive_seed(master, path):
    s = mix64(master)
    for label, index in path:
        s = seed_step(s, label, index)
    return s


def global_hash(key):
    return mix64(key ^ label_hash("global"))


def window_hash(window, v):
    h = 1 % v
    for t in window:
        h = h * (t + 2) % v
    return h


def green_set(h, key, gamma, v):
    count = int(gamma * v + 1e-9)
    ranked = sorted((mix_words(key, [h, t]), t) for t in range(v))
    return sorted(t for _, t in ranked[:count])


def g_mask(h, key, layers, token):
    m = 0
    for layer in range(1, layers + 1):
        m |= (mix_words(key, [h, layer, token]) & 1) << (layer - 1)
    return m


def normal_table():
    mpmath.mp.dps = 60
    rows = ["z,log10_p"]
    zs = [-8 + 0.25 * i for i in range(65)] + [8.0001, 8.5, 9.0, 10.0, 12.0, 15.0, 20.0, 30.0, 50.0, 100.0, 200.0, 345.0, 1000.0]
    for z in zs:
        p = mpmath.erfc(mpmath.mpf(z) / mpmath.sqrt(2)) / 2
        rows.append(f"{z!r},{mpmath.nstr(mpmath.log10(p), 25)}")
    return rows


def seed_table():
    rows = ["master,path,seed"]
    labels = ["teacher", "corpus", "seq", "token", "eval-gen", "source-key", "", "a b"]
    for i in range(100):
        master = mix64(i * 7919) if i % 3 else i
        depth = i % 5
        path = [(labels[(i + j) % len(labels)], (i * 31 + j * 17) % 1000) for j in range(depth)]
        text = ";".join(f"{l}:{n}" for l, n in path)
        rows.append(f"{master},{text},{derive_seed(master, path)}")
    return rows


def partition_table():
    rows = ["key,h,gamma,vocab,green"]
    v = 256
    for key in [0, 1, 15485863, (1 << 63) + 5]:
        for h in [0, 1, 5, 200, 255, global_hash(key)]:
            for gamma in [0.5, 0.25]:
                rows.append(f"{key},{h},{gamma},{v},{' '.join(map(str, green_set(h, key, gamma, v)))}")
    return rows


def hash_table():
    rows = ["window,vocab,h"]
    windows = [[3, 7], [0], [254], [1, 2, 3], [255, 255, 255], [10, 20, 30, 40], [126, 62]]
    for w in windows:
        for v in [16, 256, 1000]:
            ww = [t % v for t in w]
            rows.append(f"{' '.join(map(str, ww))},{v},{window_hash(ww, v)}")
    return rows


def gmask_table():
    rows = ["key,h,layers,token,mask"]
    for key in [0, 15485863]:
        for h in [0, 77, global_hash(key)]:
            for token in [0, 1, 100, 255]:
                rows.append(f"{key},{h},30,{token},{g_mask(h, key, 30, token)}")
    return rows


SNAPSHOT_CORPUS = [
    ([5, 1], [2, 3, 2, 3, 0]),
    ([3], [2, 3, 4]),
    ([], [1, 1, 2]),
]


def snapshot_bytes(order, v, beta, smoothing):
    counts = {}
    for prompt, cont in SNAPSHOT_CORPUS:
        toks = prompt + cont
        for j in range(order):
            for i in range(max(len(prompt), j), len(toks)):
                key = (j, tuple(toks[i - j:i]), toks[i])
                counts[key] = counts.get(key, 0) + 1
    out = b"WMLM" + struct.pack("<I", 1) + bytes([0]) + struct.pack("<IId", order, v, beta) + bytes([smoothing])
    out += struct.pack("<Q", len(counts))
    for (j, ctx, t) in sorted(counts):
        out += bytes([j]) + b"".join(struct.pack("<I", x) for x in ctx) + struct.pack("<IQ", t, counts[(j, ctx, t)])
    return out


def main():
    DATA.mkdir(exist_ok=True)
    for name, rows in [
        ("normal_log10_sf.csv", normal_table()),
        ("derive_seed.csv", seed_table()),
        ("green_partition.csv", partition_table()),
        ("window_hash.csv", hash_table()),
        ("g_mask.csv", gmask_table()),
    ]:
        (DATA / name).write_text("\n".join(rows) + "\n")
    corpus = "\n".join(f"{' '.join(map(str, p))} | {' '.join(map(str, c))}" for p, c in SNAPSHOT_CORPUS)
    (DATA / "snapshot_corpus.txt").write_text(corpus + "\n")
    (DATA / "snapshot_order3.wmlm").write_bytes(snapshot_bytes(3, 8, 0.5, 1))


if __name__ == "__main__":
    main()
