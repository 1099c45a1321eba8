import time

import numpy as np

from fusenmt.config import ExperimentConfig
from fusenmt.train import Trainer, prepare_task, pretrain_teacher_for


def payload(n_pairs, seed, steps, vocab=600):
    return {
        "task": {"kind": "lexswap-reorder", "n_pairs": n_pairs, "vocab_size": vocab,
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
for n_pairs, steps in [(1000, 800), (25000, 1600)]:
    gains = []
    for seed in (1, 2, 3):
        pay = payload(n_pairs, seed, steps)
        cfg_b = ExperimentConfig.from_dict(pay)
        data = prepare_task(cfg_b)
        teacher, info = pretrain_teacher_for(cfg_b, data)
        tr_b = Trainer(cfg_b, data)
        tr_b.run(quiet=True)
        bleu_b = tr_b.corpus_bleu(data.test_pairs, beam=1)
        cfg_ad = ExperimentConfig.from_dict(pay).with_strategy({"ad"})
        tr_ad = Trainer(cfg_ad, data, teacher=teacher)
        tr_ad.run(quiet=True)
        bleu_ad = tr_ad.corpus_bleu(data.test_pairs, beam=1)
        gains.append(bleu_ad - bleu_b)
        print(f"V=600 n={n_pairs} steps={steps} seed={seed}: acc={info['masked_accuracy']:.3f} "
              f"base={bleu_b:.2f} ad={bleu_ad:.2f} gain={bleu_ad - bleu_b:+.2f} "
              f"[{time.time() - t0:.0f}s]", flush=True)
    print(f"V=600 n={n_pairs}: mean gain {np.mean(gains):+.2f}", flush=True)
