"""Reference values for the soft-label algebra, computed at 50 significant digits.

Regenerate with:  python3 soft_labels_oracle.py > soft_labels.json
"""
import json
import random

from mpmath import mp, mpf, exp, log

mp.dps = 50


def instance(rng, k):
    queue_len = rng.randint(1, 24)
    m = rng.randint(1, queue_len)
    if k % 50 == 0:
        # uniform similarities over the whole queue: the scale vanishes
        m = queue_len = max(2, queue_len)
        d = [rng.uniform(-1, 1)] * m
        n = queue_len
    else:
        d = [rng.uniform(-1, 1) for _ in range(m)]
        n = rng.choice([max(2, queue_len), rng.randint(max(2, queue_len), 4096)])
    tau_prime = 10 ** rng.uniform(-1.7, 0)
    tau = 10 ** rng.uniform(-1.3, 0)
    indices = sorted(rng.sample(range(1, queue_len + 1), m))
    logits = [rng.uniform(-1, 1) for _ in range(queue_len + 1)]

    e = [exp(mpf(x) / mpf(tau_prime)) for x in d]
    z = sum(e)
    b = [v / z for v in e]
    h = -sum(v * log(v) for v in b if v > 0)
    scale = min(max(1 - h / log(mpf(n)), mpf(0)), mpf(1))
    s = [min(mpf(1), v * scale) for v in b]
    raw = [mpf(0)] * (queue_len + 1)
    raw[0] = mpf(1)
    for i, si in zip(indices, s):
        raw[i] = si
    mass = sum(raw)
    target = [v / mass for v in raw]
    scaled = [mpf(x) / mpf(tau) for x in logits]
    lse = log(sum(exp(v) for v in scaled))
    loss = -sum(t * (v - lse) for t, v in zip(target, scaled))
    f = lambda v: float(v)
    return {
        "d": d,
        "tau_prime": tau_prime,
        "n": n,
        "queue_len": queue_len,
        "indices": indices,
        "logits": logits,
        "tau": tau,
        "b": [f(v) for v in b],
        "entropy": f(h),
        "scale": f(scale),
        "s": [f(v) for v in s],
        "target": [f(v) for v in target],
        "loss": f(loss),
    }


def main():
    rng = random.Random(20261015)
    print(json.dumps([instance(rng, k) for k in range(1000)]))


if __name__ == "__main__":
    main()
