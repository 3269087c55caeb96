"""Scaled-down dry run of the phantom benchmark (dev tool, not shipped)."""
import sys
import time

import numpy as np

from hseg.metrics import detection_match, dsc
from hseg.nets import forward_volume
from hseg.phantom import PhantomConfig, generate_corpus, load_split
from hseg.postprocess import label_objects_26, postprocess_detect, postprocess_liver
from hseg.train import (TrainConfig, prepare_detect_cases, prepare_liver_cases,
                        train_detect, train_liver)

ITERS = int(sys.argv[1]) if len(sys.argv) > 1 else 300
corpus = sys.argv[2] if len(sys.argv) > 2 else "/tmp/bench_corpus"

t0 = time.time()
import os
if not os.path.exists(corpus + "/manifest.tsv"):
    generate_corpus(corpus, 24, PhantomConfig(), seed=42,
                    split_counts={"train": 20, "test": 4})
print(f"corpus: {time.time()-t0:.0f}s", flush=True)

train_cases = load_split(corpus, "train")
test_cases = load_split(corpus, "test")

t = time.time()
liver_stacks = prepare_liver_cases(train_cases)
cfg = TrainConfig(iterations=ITERS, batch_size=6, lr=1e-3, seed=11, loss="dice",
                  lesion_slices_only=False, rotation_deg=0.0, val_every=0)
liver_net, _, lh = train_liver(liver_stacks, cfg)
print(f"liver train {ITERS} iters: {time.time()-t:.0f}s  "
      f"loss {lh.train_loss[0]:.3f}->{np.mean(lh.train_loss[-20:]):.3f}", flush=True)

t = time.time()
from hseg.train import liver_input_volume
liver_masks, dscs = [], []
for case in test_cases:
    prob = forward_volume(liver_net, liver_input_volume(case.dce))
    mask = postprocess_liver(prob)
    liver_masks.append(mask)
    dscs.append(dsc(mask, case.liver))
print(f"liver eval: {time.time()-t:.0f}s  DSC per case {['%.3f' % d for d in dscs]} "
      f"median {np.median(dscs):.3f}", flush=True)

results = {}
for variant in ("dual", "single6"):
    t = time.time()
    stacks = prepare_detect_cases(train_cases, variant)
    dcfg = TrainConfig(iterations=ITERS, batch_size=4, lr=1e-4, seed=13, loss="wce",
                       patch_size=64, rotation_deg=45.0, val_every=0)
    net, _, dh, w = train_detect(stacks, dcfg, variant)
    train_t = time.time() - t
    t = time.time()
    from hseg.train import detect_input_volume
    tprs, fpcs = [], []
    for case, lmask in zip(test_cases, liver_masks):
        prob = forward_volume(net, detect_input_volume(case.dce, case.dw, variant))
        objs = postprocess_detect(prob, lmask, t=0.5)
        truth = label_objects_26(case.lesions)
        tpr, fp, _ = detection_match(objs, truth)
        tprs.append(tpr)
        fpcs.append(fp)
    results[variant] = (np.mean(tprs), np.median(fpcs))
    print(f"{variant}: train {train_t:.0f}s eval {time.time()-t:.0f}s  "
          f"loss {dh.train_loss[0]:.3f}->{np.mean(dh.train_loss[-20:]):.3f}  "
          f"weights {w[0]:.2f}/{w[1]:.2f}  TPR {np.mean(tprs):.3f} "
          f"(per case {['%.2f' % x for x in tprs]})  medFPC {np.median(fpcs):.1f} "
      f"(per case {fpcs})", flush=True)

print(f"TOTAL {time.time()-t0:.0f}s; dual TPR {results['dual'][0]:.3f} >= "
      f"single6 TPR {results['single6'][0]:.3f}: {results['dual'][0] >= results['single6'][0]}")
