"""Tokenization, sentence segmentation and document assembly."""
from .bpe import BOS, EOS, MASK, PAD, SPECIALS, UNK, BPEError, Vocab, train_bpe
from .document import (
    MAX_SENTENCE_LEN, MAX_SENTENCES, Document, DocumentError, build_document, corpus_text_lines,
    document_from_record, encode_sentence, iter_corpus, load_documents, write_corpus,
)
from .segment import split_sentences

__all__ = [
    "PAD", "BOS", "EOS", "MASK", "UNK", "SPECIALS", "Vocab", "train_bpe", "BPEError",
    "split_sentences", "Document", "DocumentError", "encode_sentence", "build_document",
    "load_documents", "iter_corpus", "write_corpus", "document_from_record",
    "corpus_text_lines", "MAX_SENTENCE_LEN", "MAX_SENTENCES",
]
