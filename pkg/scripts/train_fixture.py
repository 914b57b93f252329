"""Train the bundled fixture ViT on the synthetic grating task.

    python scripts/train_fixture.py --out src/vitptq/data/fixture.ckpt

Run once; the resulting checkpoint is committed and used as the teacher in
tests and acceptance checks.
"""

import argparse
import time

import numpy as np

from vitptq import ops
from vitptq.autograd import Tape
from vitptq.checkpoint import save_checkpoint
from vitptq.optim import Adam
from vitptq.synthetic import make_images
from vitptq.vit import ViT, ViTConfig, predict_logits

TRAIN_SEED = 100
EVAL_SEED = 200


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--train-size", type=int, default=20000)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    x, y = make_images(args.train_size, TRAIN_SEED)
    xe, ye = make_images(2000, EVAL_SEED)
    model = ViT.init(ViTConfig(), seed=args.seed)
    params = list(model.named_parameters().values())
    for p in params:
        p.requires_grad = True
    opt = Adam(params, lr=args.lr)
    rng = np.random.default_rng(args.seed)
    steps_per_epoch = args.train_size // args.batch_size
    total = steps_per_epoch * args.epochs
    step = 0
    for epoch in range(args.epochs):
        t0 = time.time()
        order = rng.permutation(args.train_size)
        losses = []
        for j in range(steps_per_epoch):
            idx = order[j * args.batch_size:(j + 1) * args.batch_size]
            opt.lr = args.lr * 0.5 * (1 + np.cos(np.pi * step / total)) * min(1.0, (step + 1) / 300)
            with Tape() as tape:
                loss = ops.cross_entropy(model(x[idx]), y[idx])
            opt.step(tape.backward(loss))
            losses.append(loss.item())
            step += 1
        for p in params:
            p.requires_grad = False
        acc = float((predict_logits(model, xe).argmax(axis=1) == ye).mean())
        for p in params:
            p.requires_grad = True
        print(f"epoch {epoch:2d} loss {np.mean(losses):.4f} eval acc {acc:.4f} ({time.time() - t0:.1f}s)",
              flush=True)
    for p in params:
        p.requires_grad = False
    save_checkpoint(model, args.out, provenance={"script": "train_fixture.py", "seed": args.seed,
                                                 "train_seed": TRAIN_SEED, "train_size": args.train_size,
                                                 "epochs": args.epochs})


if __name__ == "__main__":
    main()
