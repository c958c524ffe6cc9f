# %% [markdown]
# # One forward pass
# A two-turn context goes through the word-level GRU, then the turn-level
# self-attention encoder. The first half of the decoder reads the context
# representation and the second half reads the per-turn sentence vectors.

# %%
import numpy as np

from xrecosa import layers as Lyr
from xrecosa.corpus import Sample, build_vocab, collate, parse_dialogues
from xrecosa.model import ModelConfig, XReCoSa, mha_params

lines = ["good morning . what's the matter with you ? __eou__ good morning , doctor . i have a terrible headache . "
         "__eou__ all right , young man . tell me how it got started . __eou__"]
dialogues, _ = parse_dialogues(lines)
vocab = build_vocab(dialogues)
d = dialogues[0]
sample = Sample([vocab.encode_text(u) for u in d.utterances[:-1]], vocab.encode_text(d.utterances[-1]))
batch = collate([sample])
print("context ids:", batch.ctx_ids.shape, "response in:", batch.resp_in.shape)

# %%
cfg = ModelConfig(d=32, heads=4, vocab_size=len(vocab), max_sentence_len=20)
model = XReCoSa(cfg, seed=0)
enc = model.encode(batch)
print("H_u", enc.H_u.shape, "H_c", enc.H_c.shape)
logits = model.logits(batch)
print("logits", logits.shape, "loss", float(model.loss(batch).data), "vs ln V =", np.log(len(vocab)))

# %% [markdown]
# Turn-level attention weights over the two context turns (rows sum to one).

# %%
_, w = Lyr.multi_head_attention(mha_params(model.params, "enc.layers.0.attn"), enc.H_u, enc.H_u, enc.H_u,
                                enc.turn_mask[:, None, :], return_weights=True)
print(np.round(w.data[0, 0], 3))

# %%
# which memory each decoder part reads in each mode
for mode in ("x_fusion", "context_only", "sentence_only"):
    intent, gen = enc.memories(mode)
    print(mode, "intention reads", "H_c" if intent is enc.H_c else "H_u", "| generation reads",
          "H_c" if gen is enc.H_c else "H_u")
