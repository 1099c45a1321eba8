import itertools
import json
import time

import numpy as np

from fusenmt.config import ExperimentConfig
from fusenmt.train import Trainer, prepare_task, pretrain_teacher_for


def payload(n_pairs, seed, steps, dropout, teacher_layers, pretrain_steps, student_tap=None):
    p = {
        "task": {"kind": "lexswap-reorder", "n_pairs": n_pairs, "vocab_size": 160,
                 "len_range": [3, 9], "val_pairs": 300, "test_pairs": 300,
                 "n_successors": 3, "chain_prob": 0.85},
        "model": {"num_layers": 2, "d_model": 64, "num_heads": 4, "d_ff": 256,
                  "dropout": dropout, "max_len": 32},
        "teacher": {"num_layers": teacher_layers, "d_model": 64, "num_heads": 4, "d_ff": 256,
                    "mask_prob": 0.15, "pretrain_steps": pretrain_steps,
                    "pretrain_lr": 1e-3, "token_budget": 2048, "dropout": 0.1},
        "training": {"steps": steps, "token_budget": 1024, "val_interval": 10 ** 9,
                     "log_interval": 200},
        "optimizer": {"warmup": 150, "lr_scale": 1.0},
        "seed": seed,
    }
    if student_tap is not None:
        p["fusion"] = {"student_tap_layer": student_tap}
    return p


t0 = time.time()
teachers = {}
datas = {}

for dropout, tlayers, tap in [(0.1, 2, None), (0.1, 3, None), (0.0, 2, None),
                              (0.0, 3, None), (0.1, 3, 1), (0.0, 3, 1)]:
    gains = []
    for seed in (1, 3):
        psteps = 600 if tlayers == 2 else 1200
        pay = payload(1000, seed, 700, dropout, tlayers, psteps, tap)
        cfg_b = ExperimentConfig.from_dict(pay)
        dkey = seed
        if dkey not in datas:
            datas[dkey] = prepare_task(cfg_b)
        data = datas[dkey]
        tkey = (seed, tlayers)
        if tkey not in teachers:
            teachers[tkey] = pretrain_teacher_for(cfg_b, data)[0]
        bkey = (seed, dropout)
        if bkey not in teachers:  # reuse dict for baseline bleu cache
            tr_b = Trainer(cfg_b, data)
            tr_b.run(quiet=True)
            teachers[bkey] = tr_b.corpus_bleu(data.test_pairs, beam=1)
        bleu_b = teachers[bkey]
        cfg_ad = ExperimentConfig.from_dict(pay).with_strategy({"ad"})
        tr_ad = Trainer(cfg_ad, data, teacher=teachers[tkey])
        tr_ad.run(quiet=True)
        bleu_ad = tr_ad.corpus_bleu(data.test_pairs, beam=1)
        gains.append(bleu_ad - bleu_b)
        print(f"drop={dropout} tL={tlayers} tap={tap} seed={seed}: "
              f"base={bleu_b:.2f} ad={bleu_ad:.2f} gain={bleu_ad - bleu_b:+.2f} "
              f"[{time.time() - t0:.0f}s]", flush=True)
    print(f"  -> mean {np.mean(gains):+.2f}", flush=True)
