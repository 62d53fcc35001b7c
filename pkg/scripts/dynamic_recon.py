"""Static/dynamic reconstruction of the one-mover scene with known poses, scored on held-out times."""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from dynrecon import config, dataio, synth
from dynrecon.trainer import Trainer, evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="desk_dynamic", help="training preset")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    ap.add_argument("--seed", type=int, default=0, help="scene seed")
    ap.add_argument("--out", type=Path, default=None, help="directory for checkpoints, metrics and renders")
    ap.add_argument("--log-every", type=int, default=500, help="progress interval in steps")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    torch.set_num_threads(1)

    ds = synth.generate(synth.preset("one_mover", seed=args.seed))
    cfg = config.parse_overrides(dict(kv.split("=", 1) for kv in args.set), config.preset(args.preset))
    tr = Trainer(cfg, ds, args.out)
    start = time.perf_counter()

    def progress(tr, rec):
        if tr.step % args.log_every == 0 or tr.step == cfg.steps:
            print(f"step {tr.step:5d}  loss {rec['total']:.5f}  {time.perf_counter() - start:.0f}s", flush=True)

    tr.train(callback=progress)
    res = evaluate(tr.scene, ds, tr.heldout_frames)
    print(json.dumps({"heldout": [int(i) for i in tr.heldout_frames], "psnr": res["psnr"], "ssim": res["ssim"],
                      "mask_iou": res["mask_iou"], "minutes": (time.perf_counter() - start) / 60}, indent=1))
    if args.out is not None:
        for i in tr.heldout_frames:
            c2w = tr.scene.cameras.c2w(torch.tensor([int(i)]))[0].detach()
            img = tr.scene.render_image(c2w, float(ds.times[i]))
            dataio.write_image(args.out / f"heldout_{int(i):03d}.png", np.clip(img["rgb"], 0, 1))


if __name__ == "__main__":
    main()
