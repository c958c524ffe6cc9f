# %% [markdown]
# # Overfitting the bundled 16 dialogues
# A d=64 model should memorise the smoke corpus in a few hundred steps. Takes about a
# minute on one core.

# %%
import time

from xrecosa.corpus import build_vocab, expand_all, make_batches
from xrecosa.decoding import greedy_decode
from xrecosa.model import ModelConfig, XReCoSa
from xrecosa.synthetic import smoke_dialogues
from xrecosa.trainer import TrainConfig, Trainer, evaluate_nll

dialogues = smoke_dialogues()
vocab = build_vocab(dialogues)
samples = expand_all(dialogues, vocab)
batches = make_batches(samples, vocab, batch_size=32, seed=0)
print(len(dialogues), "dialogues,", len(samples), "samples,", len(vocab), "types")

# %%
model = XReCoSa(ModelConfig(d=64, heads=4, vocab_size=len(vocab)), seed=0)
trainer = Trainer(model, TrainConfig(lr=1e-3, seed=0), log=lambda s: None)
t0 = time.time()
for _ in range(10):
    trainer.run_steps(batches, 50)
    print(f"step {trainer.step:4d}  nll {evaluate_nll(model, batches):.4f}  {time.time() - t0:.0f}s")

# %%
for d in dialogues[:4]:
    ctx = [vocab.encode_text(u) for u in d.utterances[:-1]]
    print(d.utterances[-2], "->", vocab.decode_text(greedy_decode(model, ctx)))
