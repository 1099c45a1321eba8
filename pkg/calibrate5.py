import time

import numpy as np

from fusenmt.config import ExperimentConfig
from fusenmt.train import Trainer, prepare_task, pretrain_teacher_for


def payload(n_pairs, seed, steps):
    return {
        "task": {"kind": "lexswap-reorder", "n_pairs": n_pairs, "vocab_size": 400,
                 "len_range": [3, 9], "val_pairs": 300, "test_pairs": 300,
                 "n_successors": 3, "chain_prob": 0.85},
        "model": {"num_layers": 2, "d_model": 64, "num_heads": 4, "d_ff": 256,
                  "dropout": 0.1, "max_len": 32},
        "teacher": {"num_layers": 2, "d_model": 64, "num_heads": 4, "d_ff": 256,
                    "mask_prob": 0.15, "pretrain_steps": 600, "pretrain_lr": 1e-3,
                    "token_budget": 2048, "dropout": 0.1},
        "training": {"steps": steps, "token_budget": 1024, "val_interval": 10 ** 9,
                     "log_interval": 400},
        "optimizer": {"warmup": 150, "lr_scale": 1.0},
        "seed": seed,
    }


t0 = time.time()
teachers = {}
datas = {}
for steps in (1600,):
    gains = []
    for seed in (1, 2, 3):
        pay = payload(25000, seed, steps)
        cfg_b = ExperimentConfig.from_dict(pay)
        if seed not in datas:
            datas[seed] = prepare_task(cfg_b)
        data = datas[seed]
        if seed not in teachers:
            teachers[seed] = pretrain_teacher_for(cfg_b, data)[0]
        tr_b = Trainer(cfg_b, data)
        tr_b.run(quiet=True)
        bleu_b = tr_b.corpus_bleu(data.test_pairs, beam=1)
        cfg_ad = ExperimentConfig.from_dict(pay).with_strategy({"ad"})
        tr_ad = Trainer(cfg_ad, data, teacher=teachers[seed])
        tr_ad.run(quiet=True)
        bleu_ad = tr_ad.corpus_bleu(data.test_pairs, beam=1)
        gains.append(bleu_ad - bleu_b)
        print(f"steps={steps} n=25000 seed={seed}: base={bleu_b:.2f} ad={bleu_ad:.2f} "
              f"gain={bleu_ad - bleu_b:+.2f} [{time.time() - t0:.0f}s]", flush=True)
    print(f"steps={steps}: mean gain {np.mean(gains):+.2f}", flush=True)
