from trainer_service.tokenizer import ByteTokenizer


def test_ascii_roundtrip():
    tok = ByteTokenizer()
    text = 'The model answers with {"relation": "person age"} on one line.'
    assert tok.decode(tok.encode(text)) == text


def test_multibyte_roundtrip():
    tok = ByteTokenizer()
    text = "café ünïcode 数据 🙂"
    ids = tok.encode(text)
    assert all(0 <= i < 256 for i in ids)
    assert len(ids) == len(text.encode("utf-8"))
    assert tok.decode(ids) == text


def test_decode_skips_special_tokens():
    tok = ByteTokenizer()
    ids = [tok.bos_id] + tok.encode("hi") + [tok.eos_id, tok.pad_id, tok.pad_id]
    assert tok.decode(ids) == "hi"


def test_empty_text():
    tok = ByteTokenizer()
    assert tok.encode("") == []
    assert tok.decode([]) == ""


def test_special_ids_outside_byte_range_and_distinct():
    tok = ByteTokenizer()
    specials = {tok.bos_id, tok.eos_id, tok.pad_id}
    assert len(specials) == 3
    assert all(i >= 256 for i in specials)
    assert tok.vocab_size == 259


def test_invalid_utf8_sequence_is_replaced_not_fatal():
    tok = ByteTokenizer()
    assert "\N{REPLACEMENT CHARACTER}" in tok.decode([0xFF, 0xFE])
