#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use fqninfer::corpus::{parse_annotated, read_corpus, AnnotatedUnit, AnnotationKind, CorpusRecord, RecordAnnotation};
use fqninfer::tokenizer::{pre_tokenize, Vocab, VocabConfig};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures")).join(name)
}

pub fn fixture_vocab() -> Vocab {
    Vocab::load(fixture("vocab.txt"), &VocabConfig::default()).unwrap()
}

pub fn fixture_records() -> Vec<CorpusRecord> {
    read_corpus(fixture("corpus.jsonl")).unwrap()
}

pub fn fixture_units() -> Vec<AnnotatedUnit> {
    fixture_records().iter().map(|r| parse_annotated(r).unwrap()).collect()
}

/// Builds record text while tracking annotation offsets.
#[derive(Default)]
pub struct Doc {
    pub text: String,
    pub anns: Vec<RecordAnnotation>,
}

impl Doc {
    pub fn s(&mut self, t: &str) -> &mut Self {
        self.text.push_str(t);
        self
    }

    /// Simple name of `fqn`, annotated as a type.
    pub fn ty(&mut self, fqn: &str) -> &mut Self {
        let name = fqn.rsplit('.').next().unwrap();
        self.mark(name, fqn, AnnotationKind::TypeName)
    }

    pub fn recv(&mut self, var: &str, fqn: &str) -> &mut Self {
        self.mark(var, fqn, AnnotationKind::Receiver)
    }

    fn mark(&mut self, surface: &str, fqn: &str, kind: AnnotationKind) -> &mut Self {
        let start = self.text.len();
        self.text.push_str(surface);
        self.anns.push(RecordAnnotation {
            start,
            end: self.text.len(),
            fqn: fqn.into(),
            kind,
        });
        self
    }

    pub fn record(&self, id: &str, library: &str) -> CorpusRecord {
        CorpusRecord {
            id: id.into(),
            library: library.into(),
            text: self.text.clone(),
            annotations: self.anns.clone(),
        }
    }
}

/// Vocabulary holding every pre-token of `texts` whole, plus the specials.
pub fn vocab_for<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
    let mut words = BTreeSet::new();
    for t in texts {
        for (s, e) in pre_tokenize(t) {
            words.insert(t[s..e].to_string());
        }
    }
    let specials = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
    Vocab::from_tokens(
        specials.iter().map(|s| s.to_string()).chain(words),
        &VocabConfig::default(),
    )
    .unwrap()
}

pub struct Synth {
    pub units: Vec<AnnotatedUnit>,
    pub vocab: Vocab,
    pub fqns: Vec<String>,
}

const ADJS: [&str; 6] = ["Fast", "Lazy", "Quiet", "Bright", "Heavy", "Sharp"];
const NOUNS: [&str; 5] = ["Reader", "Writer", "Parser", "Buffer", "Router"];
const VERBS: [&str; 5] = ["load", "emit", "scan", "flush", "route"];
const PACKAGES: [&str; 10] = [
    "org.acme.io",
    "org.acme.net",
    "org.acme.text",
    "com.zeta.core",
    "com.zeta.web",
    "com.zeta.store",
    "net.kilo.time",
    "net.kilo.math",
    "io.quark.data",
    "io.quark.sync",
];

/// 30 FQNs with unique simple names, each used in at least three units
/// whose surrounding code is specific to it.
pub fn synth_corpus() -> Synth {
    let n = 30;
    let class = |i: usize| format!("{}{}", ADJS[i / 5], NOUNS[i % 5]);
    let fqn = |i: usize| format!("{}.{}", PACKAGES[(i * 3) % 10], class(i));
    let var = |i: usize| {
        let c = class(i);
        format!("{}{}", c[..1].to_lowercase(), &c[1..])
    };
    let ma = |i: usize| format!("{}{}", VERBS[i % 5], ADJS[i / 5]);
    let mb = |i: usize| format!("to{}", class(i));
    let mc = |i: usize| format!("from{}", class(i));

    let mut records = Vec::new();
    for i in 0..n {
        let (j, k) = ((i + 7) % n, (i + 13) % n);
        let mut a = Doc::default();
        a.ty(&fqn(i)).s(&format!(" {} = new ", var(i))).ty(&fqn(i)).s(&format!("({i});\n"));
        a.s(&format!("{}.{}({});\n", var(i), ma(i), var(i)));
        a.s(&format!("int n{i} = {}.{}();\n", var(i), mb(i)));
        records.push(a.record(&format!("syn-{i}-a"), "synth"));

        let shared = format!("shared{}", class(i));
        let mut b = Doc::default();
        b.recv(&shared, &fqn(i)).s(&format!(".{}({i});\n", ma(i)));
        b.ty(&fqn(j)).s(&format!(" {} = ", var(j))).recv(&shared, &fqn(i)).s(&format!(".{}();\n", mb(i)));
        records.push(b.record(&format!("syn-{i}-b"), "synth"));

        let mut c = Doc::default();
        c.ty(&fqn(i)).s(&format!(" {} = ", var(i))).ty(&fqn(k)).s(&format!(".{}({i});\n", mc(k)));
        c.s(&format!("{}.{}();\n", var(i), ma(i)));
        c.s(&format!("return {};\n", var(i)));
        records.push(c.record(&format!("syn-{i}-c"), "synth"));
    }
    let fqns: Vec<String> = (0..n).map(fqn).collect();
    let vocab = vocab_for(records.iter().map(|r| r.text.as_str()).chain(fqns.iter().map(String::as_str)));
    let units = records.iter().map(|r| parse_annotated(r).unwrap()).collect();
    Synth { units, vocab, fqns }
}
