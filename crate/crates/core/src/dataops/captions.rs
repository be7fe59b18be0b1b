use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Closed-class words plus frequent caption verbs and adjectives; never nouns.
const NON_NOUNS: &str = "
a an the this that these those some any each every no all both either neither much many more most
few several such what which whose who whom whatever another other own same
i me my mine we us our ours you your yours he him his she her hers it its they them their theirs
myself yourself himself herself itself ourselves themselves one ones
in on at by for with about against between into through during before after above below to from up
down out off over under again further near onto upon within without along across behind beyond
around among toward towards beside besides inside outside via per than like as of
and or but nor so yet if then else because while although though whereas unless until since when
where why how whether
is are was were be been being am do does did done doing have has had having will would shall should
can could may might must
not very too also just only even still quite rather really almost already always never often
sometimes usually here there now perhaps somewhat slightly highly
appears appear shows show showing shown depicts depict features feature seems seem looks look stands
stand sits sit holds hold wears wear lies lie rests rest hangs hang contains contain includes
include creates create gives give makes make takes take captures capture displays display adds add
set placed located filled covered made seen taken
big small large little tall short long wide narrow high low old new young bright dark light heavy
soft hard warm cold hot cool clear calm busy full empty open closed close far deep thick thin
good great nice fine beautiful pretty lovely cute ugly simple plain vivid rich detailed various
different similar whole entire main single multiple overall general
red orange yellow green blue purple pink brown black white gray grey golden silver
two three four five six seven eight nine ten eleven twelve twenty hundred thousand first second
third last next
";

/// `-ing` words that are nouns in captions.
const ING_NOUNS: &str = "
building buildings painting paintings ceiling ceilings clothing ring rings king kings thing things
string strings wing wings spring evening morning wedding sibling siblings pudding swing swings
sling bedding railing railings awning awnings stocking stockings ping sing lighting
";

/// Deterministic rule-based noun extractor: lowercase alphabetic tokens that
/// are not in the closed-class lexicon and do not carry an adverb, adjective
/// or verb suffix.
#[derive(Clone, Debug)]
pub struct NounTagger {
    non_nouns: HashSet<&'static str>,
    ing_nouns: HashSet<&'static str>,
}

impl Default for NounTagger {
    fn default() -> Self {
        Self {
            non_nouns: NON_NOUNS.split_whitespace().collect(),
            ing_nouns: ING_NOUNS.split_whitespace().collect(),
        }
    }
}

impl NounTagger {
    pub fn is_noun(&self, word: &str) -> bool {
        if word.len() < 2
            || !word.bytes().all(|b| b.is_ascii_lowercase())
            || self.non_nouns.contains(word)
        {
            return false;
        }
        if word.ends_with("ing") {
            return self.ing_nouns.contains(word);
        }
        const SUFFIXES: [&str; 9] = [
            "ly", "ous", "ful", "ive", "able", "ible", "less", "ish", "ed",
        ];
        !SUFFIXES
            .iter()
            .any(|s| word.len() > s.len() + 2 && word.ends_with(s))
    }

    pub fn nouns(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .map(str::to_lowercase)
            .filter(|w| self.is_noun(w))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub distinct_nouns: u64,
    pub valid_nouns: u64,
    pub total_nouns: u64,
    pub records: u64,
    pub avg_per_image: f64,
    pub valid_threshold: u64,
    pub histogram: BTreeMap<String, u64>,
}

impl CaptionStats {
    pub fn from_histogram(
        histogram: BTreeMap<String, u64>,
        records: u64,
        valid_threshold: u64,
    ) -> Self {
        let total_nouns = histogram.values().sum();
        Self {
            distinct_nouns: histogram.len() as u64,
            valid_nouns: histogram.values().filter(|&&n| n > valid_threshold).count() as u64,
            total_nouns,
            records,
            avg_per_image: if records == 0 {
                0.0
            } else {
                total_nouns as f64 / records as f64
            },
            valid_threshold,
            histogram,
        }
    }

    /// Combine two shards: histograms add, record counts add.
    pub fn merge(&self, other: &CaptionStats) -> CaptionStats {
        let mut hist = self.histogram.clone();
        for (k, v) in &other.histogram {
            *hist.entry(k.clone()).or_insert(0) += v;
        }
        Self::from_histogram(hist, self.records + other.records, self.valid_threshold)
    }

    /// `VN / DN`, zero for an empty corpus.
    pub fn valid_ratio(&self) -> f64 {
        if self.distinct_nouns == 0 {
            0.0
        } else {
            self.valid_nouns as f64 / self.distinct_nouns as f64
        }
    }
}

/// Noun statistics of a caption corpus. A noun is valid when it occurs
/// strictly more than `valid_threshold` times.
pub fn caption_stats<S: AsRef<str>>(captions: &[S], valid_threshold: u64) -> CaptionStats {
    let tagger = NounTagger::default();
    let mut hist = BTreeMap::new();
    for c in captions {
        for n in tagger.nouns(c.as_ref()) {
            *hist.entry(n).or_insert(0) += 1;
        }
    }
    CaptionStats::from_histogram(hist, captions.len() as u64, valid_threshold)
}

/// Reported noun statistics of a large caption corpus, kept for citation.
/// The corpora are not available here and absolute counts depend on the tagger.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceCorpus {
    pub dataset: &'static str,
    pub valid_nouns: u64,
    pub distinct_nouns: u64,
    pub total_nouns: u64,
    pub avg_per_image: f64,
}

pub const REFERENCE_CORPORA: [ReferenceCorpus; 4] = [
    ReferenceCorpus {
        dataset: "LAION",
        valid_nouns: 210_000,
        distinct_nouns: 2_461_000,
        total_nouns: 72_000_000,
        avg_per_image: 6.4,
    },
    ReferenceCorpus {
        dataset: "LAION-LLaVA",
        valid_nouns: 85_000,
        distinct_nouns: 646_000,
        total_nouns: 233_900_000,
        avg_per_image: 20.9,
    },
    ReferenceCorpus {
        dataset: "SAM-LLaVA",
        valid_nouns: 23_000,
        distinct_nouns: 124_000,
        total_nouns: 327_900_000,
        avg_per_image: 29.3,
    },
    ReferenceCorpus {
        dataset: "Internal",
        valid_nouns: 152_000,
        distinct_nouns: 582_000,
        total_nouns: 136_600_000,
        avg_per_image: 12.2,
    },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub valid_nouns: u64,
    pub distinct_nouns: u64,
    pub vn_over_dn: f64,
    pub total_nouns: u64,
    pub average: f64,
}

impl ReportRow {
    fn new(name: &str, s: &CaptionStats) -> Self {
        Self {
            name: name.to_string(),
            valid_nouns: s.valid_nouns,
            distinct_nouns: s.distinct_nouns,
            vn_over_dn: s.valid_ratio(),
            total_nouns: s.total_nouns,
            average: s.avg_per_image,
        }
    }
}

/// Two corpora side by side, with `b − a` deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub rows: [ReportRow; 2],
    pub delta_vn_over_dn: f64,
    pub delta_total_nouns: i64,
    pub delta_average: f64,
}

impl StatsReport {
    pub const COLUMNS: [&'static str; 3] = ["VN/DN", "Total Noun", "Average"];

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>24} {:>12} {:>12}",
            "Dataset",
            Self::COLUMNS[0],
            Self::COLUMNS[1],
            Self::COLUMNS[2]
        );
        for r in &self.rows {
            let ratio = format!(
                "{}/{} = {:.1}%",
                r.valid_nouns,
                r.distinct_nouns,
                100.0 * r.vn_over_dn
            );
            let _ = writeln!(
                out,
                "{:<16} {:>24} {:>12} {:>12}",
                r.name,
                ratio,
                r.total_nouns,
                format!("{:.2}/Img", r.average)
            );
        }
        let _ = writeln!(
            out,
            "{:<16} {:>24} {:>12} {:>12}",
            "delta",
            format!("{:+.1}pp", 100.0 * self.delta_vn_over_dn),
            format!("{:+}", self.delta_total_nouns),
            format!("{:+.2}", self.delta_average)
        );
        out
    }

    /// `key=value` lines for machine consumption.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (tag, r) in ["a", "b"].iter().zip(&self.rows) {
            let _ = writeln!(out, "{tag}.name={}", r.name);
            let _ = writeln!(out, "{tag}.valid_nouns={}", r.valid_nouns);
            let _ = writeln!(out, "{tag}.distinct_nouns={}", r.distinct_nouns);
            let _ = writeln!(out, "{tag}.vn_over_dn={}", r.vn_over_dn);
            let _ = writeln!(out, "{tag}.total_nouns={}", r.total_nouns);
            let _ = writeln!(out, "{tag}.average={}", r.average);
        }
        let _ = writeln!(out, "delta.vn_over_dn={}", self.delta_vn_over_dn);
        let _ = writeln!(out, "delta.total_nouns={}", self.delta_total_nouns);
        let _ = writeln!(out, "delta.average={}", self.delta_average);
        out
    }
}

pub fn stats_report(a: &CaptionStats, a_name: &str, b: &CaptionStats, b_name: &str) -> StatsReport {
    StatsReport {
        rows: [ReportRow::new(a_name, a), ReportRow::new(b_name, b)],
        delta_vn_over_dn: b.valid_ratio() - a.valid_ratio(),
        delta_total_nouns: b.total_nouns as i64 - a.total_nouns as i64,
        delta_average: b.avg_per_image - a.avg_per_image,
    }
}
