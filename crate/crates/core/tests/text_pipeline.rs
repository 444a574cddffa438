use irnlm::corpus::{build_vocabulary, encode_ids, ingest_annotated, restrict, ColumnSchema, StreamMode, Vocabulary};
use irnlm::embed::{extract_static, EmbeddingMatrix, Protocol};
use irnlm::glove::{build_cooccurrence, train_glove, EmbeddingTable, GloveConfig};
use irnlm::synth::{gen_corpus, CorpusConfig};

fn corpus(seed: u64, n_tokens: usize) -> irnlm::synth::SynthCorpus {
    gen_corpus(&CorpusConfig {
        n_tokens,
        n_categories: 4,
        roots_per_category: 6,
        n_runs: 2,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn saved_corpus_reads_back_token_for_token() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(3, 600);
    c.save(dir.path()).unwrap();
    let back = ingest_annotated(dir.path().join("corpus.tsv"), &ColumnSchema::default()).unwrap();
    assert_eq!(back.len(), c.corpus.len());
    for (a, b) in back.tokens.iter().zip(&c.corpus.tokens) {
        assert_eq!(
            (&a.surface, &a.pos, &a.morph, a.ncn),
            (&b.surface, &b.pos, &b.morph, b.ncn)
        );
        assert_eq!((a.is_content, a.run_id), (b.is_content, b.run_id));
        assert!((a.onset_s - b.onset_s).abs() <= 5e-4);
    }
    for mode in [StreamMode::Integral, StreamMode::Semantic, StreamMode::Syntactic] {
        assert_eq!(restrict(&back, mode).unwrap(), restrict(&c.corpus, mode).unwrap());
    }
}

#[test]
fn static_embeddings_follow_the_stream_and_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = corpus(1, 4000);
    let stim = corpus(2, 500);
    let s_train = restrict(&train.corpus, StreamMode::Semantic).unwrap();
    let vocab = build_vocabulary(&[&s_train]).unwrap();
    let vpath = dir.path().join("vocab.tsv");
    vocab.save_tsv(&vpath).unwrap();
    let vocab = Vocabulary::load_tsv(&vpath).unwrap();

    let ids = encode_ids(&s_train, &vocab);
    let cooc = build_cooccurrence(&[ids], 5, vocab.len()).unwrap();
    let cfg = GloveConfig {
        dim: 8,
        epochs: 3,
        ..Default::default()
    };
    let fit = train_glove(&cooc, &cfg).unwrap();
    let tpath = dir.path().join("glove.emb");
    fit.table.save(&tpath).unwrap();
    let table = EmbeddingTable::load(&tpath).unwrap();
    // Stored as f32.
    assert_eq!((table.rows, table.dim), (fit.table.rows, fit.table.dim));
    for (a, b) in table.vectors.iter().zip(&fit.table.vectors) {
        assert_eq!(*a, *b as f32 as f64);
    }

    let s_stim = restrict(&stim.corpus, StreamMode::Semantic).unwrap();
    let e = extract_static(&s_stim, &vocab, &table, "glove", stim.corpus.len()).unwrap();
    assert_eq!((e.rows(), e.cols()), (s_stim.len(), 8));
    assert_eq!(e.provenance.protocol, Protocol::Static);
    assert_eq!(e.provenance.alignment, s_stim.alignment);
    let stim_ids = encode_ids(&s_stim, &vocab);
    for (r, &id) in stim_ids.iter().enumerate() {
        assert_eq!(e.data.row(r).iter().copied().collect::<Vec<_>>(), table.row(id));
    }

    let epath = dir.path().join("stim.emb");
    e.save(&epath).unwrap();
    // Rows came from an f32 table, so nothing is lost.
    assert_eq!(EmbeddingMatrix::load(&epath).unwrap(), e);

    // Function words get zero rows once spread over every token.
    let full = e.scatter_to_tokens().unwrap();
    assert!(full.is_token_aligned());
    for (i, t) in stim.corpus.tokens.iter().enumerate() {
        let zero = full.data.row(i).iter().all(|&v| v == 0.0);
        assert_eq!(zero, !t.is_content, "token {i}");
    }
}

#[test]
fn a_vocabulary_of_another_stream_is_refused() {
    let c = corpus(5, 300);
    let sem = restrict(&c.corpus, StreamMode::Semantic).unwrap();
    let syn = restrict(&c.corpus, StreamMode::Syntactic).unwrap();
    let vocab = build_vocabulary(&[&syn]).unwrap();
    let table = EmbeddingTable::from_rows(vocab.len(), 2, vec![0.0; vocab.len() * 2]).unwrap();
    assert!(extract_static(&sem, &vocab, &table, "glove", c.corpus.len()).is_err());
}
