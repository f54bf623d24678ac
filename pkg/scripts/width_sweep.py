"""Train the width-{4,8,12} generator arms on one synthetic set and tabulate them.

    python scripts/width_sweep.py --out sweep --epochs 1,1
"""

import argparse
import logging

import torch

from bokehgan.discriminator import DiscriminatorConfig
from bokehgan.experiments import width_sweep
from bokehgan.losses import LossWeights
from bokehgan.train import TrainConfig


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0],
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--out", default="runs/width_sweep", help="output directory")
    p.add_argument("--widths", default="4,8,12", help="comma-separated generator widths")
    p.add_argument("--epochs", default="1,1", help="PRETRAIN,REFINE epochs per arm")
    p.add_argument("--n-train", type=int, default=4, help="synthetic training pairs")
    p.add_argument("--n-val", type=int, default=2, help="synthetic validation pairs")
    p.add_argument("--size", type=int, default=64, help="synthetic image side")
    p.add_argument("--critic-channels", type=int, default=64, help="critic base channels")
    p.add_argument("--no-bokeh-loss", action="store_true", help="sweep the no-bokeh-loss arm instead")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    args = p.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    pretrain = LossWeights.pretrain()
    if args.no_bokeh_loss:
        pretrain = pretrain.without_bokeh()
    config = TrainConfig(epochs=tuple(int(e) for e in args.epochs.split(",")),
                         pretrain_weights=pretrain, seed=args.seed)
    rows = width_sweep(args.out, [int(w) for w in args.widths.split(",")], config,
                       args.n_train, args.n_val, args.size,
                       DiscriminatorConfig(base_channels=args.critic_channels))
    print(f"{'width':>5} {'params':>10} {'val PSNR':>9} {'identity':>9}  arm")
    for r in rows:
        print(f"{r['width']:>5} {r['parameters']:>10,} {r['val_psnr']:>9.3f} {r['identity_psnr']:>9.3f}  {r['arm']}")


if __name__ == "__main__":
    main()
