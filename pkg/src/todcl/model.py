"""Shared-encoder / dual-decoder seq2seq backbone."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

CHECKPOINT_FORMAT = "todcl-checkpoint"
CHECKPOINT_VERSION = 1

PAD, UNK = "<pad>", "<unk>"
BOS_STATE, EOS_STATE = "<bos_state>", "<eos_state>"
BOS_ACT, EOS_ACT = "<bos_act>", "<eos_act>"
BOS_RESP, EOS_RESP = "<bos_resp>", "<eos_resp>"
SPECIALS = [PAD, UNK, BOS_STATE, EOS_STATE, BOS_ACT, EOS_ACT, BOS_RESP, EOS_RESP, "<user>", "<state>", "<act>", "<resp>"]


class Vocab:
    """Whitespace-token vocabulary."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        missing = [s for s in SPECIALS if s not in self.index]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")

    @classmethod
    def build(cls, texts: Iterable[str], extra: Iterable[str] = ()) -> "Vocab":
        seen = set(SPECIALS)
        words = []
        for tok in list(extra) + [t for text in texts for t in text.split()]:
            if tok not in seen:
                seen.add(tok)
                words.append(tok)
        return cls(SPECIALS + sorted(words))

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    def id(self, tok: str) -> int:
        return self.index.get(tok, self.index[UNK])

    def encode(self, toks: Sequence[str]) -> list[int]:
        return [self.id(t) for t in toks]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class BackboneConfig:
    vocab_size: int = 0
    d_model: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 512
    dropout: float = 0.1
    pooling: str = "mean"

    def validate(self):
        for name in ("vocab_size", "d_model", "encoder_layers", "decoder_layers", "heads", "ffn_dim", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.pooling not in ("mean", "first", "last"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        return self


@dataclass
class EncodedSequence:
    token_states: torch.Tensor  # (B, S, d)
    pooled: torch.Tensor  # (B, d)
    mask: torch.Tensor  # (B, S), True = real token


@dataclass
class DecoderOutput:
    logits: torch.Tensor | None = None  # (B, L, V)
    tokens: list[list[int]] | None = None
    cross_attention: list[torch.Tensor] = field(default_factory=list)  # per layer, (B, L, S)


def sinusoid_table(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float32) * (-math.log(10000.0) / d))
    table = torch.zeros(n, d)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div[: d // 2])
    return table


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.h, self.dk = heads, d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mem, key_mask=None, causal=False):
        B, L, _ = x.shape
        S = mem.shape[1]
        q = self.q(x).view(B, L, self.h, self.dk).transpose(1, 2)
        k = self.k(mem).view(B, S, self.h, self.dk).transpose(1, 2)
        v = self.v(mem).view(B, S, self.h, self.dk).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dk)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(L, S, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        weights = scores.softmax(-1)
        out = (self.drop(weights) @ v).transpose(1, 2).reshape(B, L, -1)
        return self.o(out), weights.mean(1)


class FeedForward(nn.Module):
    def __init__(self, d, ffn, dropout):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, ffn), nn.GELU(), nn.Dropout(dropout), nn.Linear(ffn, d))

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, mask)[0])
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.heads, cfg.dropout)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, tgt_mask, memory, mem_mask):
        h = self.norm1(y)
        y = y + self.drop(self.self_attn(h, h, tgt_mask, causal=True)[0])
        out, cross = self.cross_attn(self.norm2(y), memory, mem_mask)
        y = y + self.drop(out)
        return y + self.drop(self.ff(self.norm3(y))), cross


class Decoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, y, tgt_mask, memory, mem_mask):
        crosses = []
        for layer in self.layers:
            y, cross = layer(y, tgt_mask, memory, mem_mask)
            crosses.append(cross)
        return self.norm(y), crosses


class DialogModel(nn.Module):
    """One encoder shared by every input family, one decoder for dialog
    states and one for the joint action-state/response sequence."""

    def __init__(self, cfg: BackboneConfig, vocab: Vocab):
        super().__init__()
        cfg.vocab_size = len(vocab)
        self.cfg = cfg.validate()
        self.vocab = vocab
        self.pad_id = vocab.pad_id
        d = cfg.d_model
        self.embed = nn.Embedding(cfg.vocab_size, d, padding_idx=self.pad_id)
        nn.init.normal_(self.embed.weight, std=d**-0.5)
        with torch.no_grad():
            self.embed.weight[self.pad_id].zero_()
        self.register_buffer("positions", sinusoid_table(cfg.max_len, d), persistent=False)
        self.drop = nn.Dropout(cfg.dropout)
        self.encoder_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
        self.encoder_norm = nn.LayerNorm(d)
        self.state_decoder = Decoder(cfg)
        self.act_decoder = Decoder(cfg)

    # -- embedding helpers

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        L = ids.shape[1]
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        return self.drop(self.embed(ids) * math.sqrt(self.cfg.d_model) + self.positions[:L])

    def batch_ids(self, seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
        """Right-pad id lists into (ids, mask)."""
        L = max((len(s) for s in seqs), default=0)
        ids = torch.full((len(seqs), L), self.pad_id, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask = torch.zeros_like(ids, dtype=torch.bool)
        for i, s in enumerate(seqs):
            mask[i, : len(s)] = True
        return ids, mask

    # -- encoder

    def encode(self, ids, mask=None) -> EncodedSequence:
        """Encode a batch; ``ids`` may be a (B, S) tensor or a list of id lists."""
        if not isinstance(ids, torch.Tensor):
            ids, mask = self.batch_ids(ids)
        if mask is None:
            mask = ids != self.pad_id
        if ids.numel() and int(ids.max()) >= self.cfg.vocab_size:
            raise ValueError("token id out of vocabulary range")
        if not bool(mask.any(dim=1).all()):
            raise ValueError("cannot encode an empty sequence")
        x = self._embed(ids)
        for layer in self.encoder_layers:
            x = layer(x, mask)
        x = self.encoder_norm(x)
        return EncodedSequence(token_states=x, pooled=self.pool(x, mask), mask=mask)

    def pool(self, x, mask):
        if self.cfg.pooling == "first":
            return x[:, 0]
        if self.cfg.pooling == "last":
            last = mask.long().sum(1) - 1
            return x[torch.arange(x.shape[0]), last]
        m = mask.to(x.dtype)[..., None]
        return (x * m).sum(1) / m.sum(1)

    # -- decoders

    def _decoder(self, which: str) -> Decoder:
        if which == "state":
            return self.state_decoder
        if which == "act":
            return self.act_decoder
        raise ValueError(f"unknown decoder {which!r}")

    def decode(self, which: str, source: EncodedSequence, tgt_in, tgt_mask=None) -> DecoderOutput:
        """Teacher-forced pass: logits for every position of ``tgt_in``."""
        if not isinstance(tgt_in, torch.Tensor):
            tgt_in, tgt_mask = self.batch_ids(tgt_in)
        if tgt_mask is None:
            tgt_mask = tgt_in != self.pad_id
        y, crosses = self._decoder(which)(self._embed(tgt_in), tgt_mask, source.token_states, source.mask)
        logits = y @ self.embed.weight.T
        return DecoderOutput(logits=logits, cross_attention=crosses)

    def decode_state(self, source: EncodedSequence, target=None, max_length: int = 64) -> DecoderOutput:
        if target is not None:
            return self.decode("state", source, target)
        return self.generate("state", source, self.vocab.id(BOS_STATE), self.vocab.id(EOS_STATE), max_length)

    def decode_act_response(self, source: EncodedSequence, target=None, max_length: int = 96) -> DecoderOutput:
        if target is not None:
            return self.decode("act", source, target)
        return self.generate("act", source, self.vocab.id(BOS_ACT), self.vocab.id(EOS_RESP), max_length)

    @torch.no_grad()
    def generate(self, which: str, source: EncodedSequence, start_id: int, end_id: int, max_length: int) -> DecoderOutput:
        """Greedy decoding. Returned token lists exclude the start and end tokens."""
        B = source.token_states.shape[0]
        out: list[list[int]] = [[] for _ in range(B)]
        if max_length <= 0:
            return DecoderOutput(tokens=out)
        ys = torch.full((B, 1), start_id, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        dec = self._decoder(which)
        for _ in range(max_length):
            y, _ = dec(self._embed(ys), torch.ones_like(ys, dtype=torch.bool), source.token_states, source.mask)
            nxt = (y[:, -1] @ self.embed.weight.T).argmax(-1)
            for b in range(B):
                if not done[b]:
                    if int(nxt[b]) == end_id:
                        done[b] = True
                    else:
                        out[b].append(int(nxt[b]))
            if bool(done.all()):
                break
            ys = torch.cat([ys, nxt[:, None]], dim=1)
        return DecoderOutput(tokens=out)

    # -- convenience

    def state_representation(self, ids) -> torch.Tensor:
        return self.encode(ids).pooled


def split_act_response(tokens: Sequence[str]) -> tuple[list[str], list[str], list[str]]:
    """Split a joint act/response sequence into (act tokens, response tokens, warnings)."""
    toks = list(tokens)
    warnings = []
    if toks and toks[0] == BOS_ACT:
        toks = toks[1:]
    if toks and toks[-1] == EOS_RESP:
        toks = toks[:-1]
    if BOS_RESP not in toks:
        warnings.append("missing <bos_resp> marker")
        return [t for t in toks if t != EOS_ACT], [], warnings
    cut = toks.index(BOS_RESP)
    acts, resp = toks[:cut], toks[cut + 1 :]
    if not acts or acts[-1] != EOS_ACT:
        warnings.append("missing <eos_act> marker")
    acts = [t for t in acts if t != EOS_ACT]
    if EOS_RESP in resp:
        resp = resp[: resp.index(EOS_RESP)]
    return acts, resp, warnings


def state_target(state_text: str) -> list[str]:
    return [BOS_STATE, *state_text.split(), EOS_STATE]


def act_response_target(act_text: str, response: str) -> list[str]:
    return [BOS_ACT, *act_text.split(), EOS_ACT, BOS_RESP, *response.split(), EOS_RESP]


# -- checkpoints


def save_checkpoint(model: DialogModel, path, meta: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.cfg),
            "vocab": list(model.vocab.tokens),
            "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
            "meta": meta or {},
        },
        path,
    )


def load_checkpoint(path) -> tuple[DialogModel, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint of this package")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    model = DialogModel(BackboneConfig(**blob["config"]), Vocab(blob["vocab"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("meta", {})
