"""Byte-level tokenizer: ids 0..255 are raw bytes, then pad/bos/eos specials."""

from __future__ import annotations

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
VOCAB_SIZE = 259
SPECIAL_IDS = (PAD_ID, BOS_ID, EOS_ID)


class ByteTokenizer:
    """UTF-8 bytes in, token ids out. Specials are never produced by encode."""

    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    vocab_size = VOCAB_SIZE

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: list[int]) -> str:
        data = bytes(i for i in ids if 0 <= i < 256)
        return data.decode("utf-8", errors="replace")
