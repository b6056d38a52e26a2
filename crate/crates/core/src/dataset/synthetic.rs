//! Template grammar for desk-scale TOP-style corpora.
//!
//! Trees use the decoupled form: only slot contents are copied into the
//! tree, carrier words are not. With `ambiguity = a`, a fixed fraction `a`
//! of the templates is *shared*: each example drawn from a shared template is
//! labeled with the template's partner intent (and partner slot labels) with
//! a template-specific probability, so one surface form maps to two gold
//! trees across the corpus.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, Example, Split};
use crate::top_format::ParseNode;

const TEMPLATES: &[(&str, f64, &str)] = &[
    ("get_weather", 1.0, "what is the weather in {location} {date_time}"),
    ("get_weather", 1.0, "will it {weather_attribute} in {location}"),
    ("get_weather", 1.0, "is it going to be {weather_attribute} {date_time}"),
    ("get_weather", 0.8, "weather forecast for {location}"),
    ("get_weather", 0.8, "will i need {weather_attribute} tires to drive {location} {date_time}"),
    ("get_info_road_condition", 0.8, "are the roads {road_condition} near {location}"),
    ("get_info_road_condition", 0.6, "road conditions {date_time} on the way to {location}"),
    ("get_info_road_condition", 0.6, "is the highway {road_condition} {date_time}"),
    ("send_message", 1.0, "text {contact} that i am {message}"),
    ("send_message", 1.0, "send a message to {contact} saying {message}"),
    ("send_message", 0.8, "tell {contact} {message}"),
    ("create_reminder", 1.0, "remind me to {todo} {date_time}"),
    ("create_reminder", 0.8, "set a reminder to {todo}"),
    ("create_reminder", 0.6, "remind {contact} to {todo}"),
    ("play_music", 1.0, "play {song} by {artist}"),
    ("play_music", 0.8, "play some {genre} music"),
    ("play_music", 0.8, "put on {artist}"),
    ("play_music", 0.6, "play {song}"),
    ("set_alarm", 1.0, "set an alarm for {date_time}"),
    ("set_alarm", 0.8, "wake me up {date_time}"),
    ("cancel_alarm", 0.6, "cancel my alarm for {date_time}"),
    ("cancel_alarm", 0.4, "turn off the alarm {date_time}"),
    ("get_directions", 1.0, "directions to {destination}"),
    ("get_directions", 0.6, "how do i get to {destination/get_event/event_name}"),
    ("get_directions", 0.6, "navigate to {destination} from {location}"),
    ("get_event", 0.8, "what events are happening in {location} {date_time}"),
    ("get_event", 0.6, "when is {event_name}"),
    ("get_estimated_duration", 0.8, "how long will it take to drive to {destination}"),
    ("get_estimated_duration", 0.6, "how long is the drive to {destination} {date_time}"),
    ("get_contact", 0.5, "what is {contact} phone number"),
    ("get_contact", 0.4, "show me {contact} contact info"),
];

const FILLERS: &[(&str, &[&str])] = &[
    (
        "location",
        &[
            "paris", "boston", "tokyo", "chicago", "denver", "sierra mountains", "lake tahoe",
            "san diego", "seattle", "austin texas",
        ],
    ),
    (
        "date_time",
        &[
            "tonight", "tomorrow morning", "this afternoon", "next week", "friday evening",
            "at noon", "this weekend", "sunday night", "at seven",
        ],
    ),
    (
        "weather_attribute",
        &["snow", "rain", "sunny", "windy", "foggy", "below freezing"],
    ),
    (
        "road_condition",
        &["icy", "flooded", "jammed", "closed", "slippery"],
    ),
    (
        "contact",
        &["mom", "alex", "jordan", "boss", "sam", "dad", "aunt maria", "doctor lee"],
    ),
    (
        "message",
        &["running late", "call back soon", "happy birthday", "see you soon", "dinner ready"],
    ),
    (
        "todo",
        &["buy milk", "pay rent", "water plants", "feed cat", "renew passport", "call grandma"],
    ),
    (
        "song",
        &["bohemian rhapsody", "yellow submarine", "hey jude", "imagine", "wonderwall"],
    ),
    (
        "artist",
        &["queen", "beatles", "adele", "coldplay", "drake", "miles davis"],
    ),
    ("genre", &["jazz", "rock", "classical", "hip hop", "country", "blues"]),
    (
        "destination",
        &["airport", "downtown", "central station", "stadium", "union square", "office"],
    ),
    (
        "event_name",
        &["film festival", "county fair", "book club", "farmers market", "comic con"],
    ),
];

const PARTNERS: &[(&str, &str, &[(&str, &str)])] = &[
    ("get_weather", "get_info_road_condition", &[("weather_attribute", "road_condition")]),
    ("get_info_road_condition", "get_weather", &[("road_condition", "weather_attribute")]),
    ("send_message", "create_reminder", &[("message", "todo")]),
    ("create_reminder", "send_message", &[("todo", "message")]),
    (
        "play_music",
        "get_event",
        &[("song", "event_name"), ("artist", "event_name"), ("genre", "event_name")],
    ),
    ("set_alarm", "create_reminder", &[]),
    ("cancel_alarm", "set_alarm", &[]),
    ("get_directions", "get_estimated_duration", &[]),
    ("get_event", "play_music", &[("event_name", "song")]),
    ("get_estimated_duration", "get_directions", &[]),
    ("get_contact", "send_message", &[]),
];

/// Probability of the partner reading, cycled over shared templates.
const PARTNER_PROBS: [f64; 5] = [0.5, 0.35, 0.45, 0.3, 0.4];

/// Fixed seed for choosing which templates become shared; independent of
/// the sampling seed so the grammar itself never changes.
const SHARED_ORDER_SEED: u64 = 0x5EED_0F_7A6;

#[derive(Debug, Clone)]
enum Piece {
    Word(&'static str),
    Slot {
        label: &'static str,
        nested: Option<(&'static str, &'static str)>,
    },
}

#[derive(Debug, Clone)]
struct Template {
    intent: &'static str,
    weight: f64,
    pieces: Vec<Piece>,
}

/// The fixed template grammar.
#[derive(Debug, Clone)]
pub struct Grammar {
    templates: Vec<Template>,
    fillers: BTreeMap<&'static str, &'static [&'static str]>,
    shared_order: Vec<usize>,
}

impl Default for Grammar {
    fn default() -> Self {
        Self::standard()
    }
}

impl Grammar {
    pub fn standard() -> Self {
        let templates: Vec<Template> = TEMPLATES
            .iter()
            .map(|&(intent, weight, pattern)| Template {
                intent,
                weight,
                pieces: pattern.split(' ').map(parse_piece).collect(),
            })
            .collect();
        let mut shared_order: Vec<usize> = (0..templates.len()).collect();
        shared_order.shuffle(&mut ChaCha8Rng::seed_from_u64(SHARED_ORDER_SEED));
        Grammar {
            templates,
            fillers: FILLERS.iter().copied().collect(),
            shared_order,
        }
    }

    pub fn intents(&self) -> Vec<&'static str> {
        let mut v: Vec<_> = self.templates.iter().map(|t| t.intent).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn slots(&self) -> Vec<&'static str> {
        self.fillers.keys().copied().collect()
    }

    pub fn template_count(&self) -> usize {
        self.templates.len()
    }

    /// Words that appear in templates outside slot positions.
    pub fn carrier_words(&self) -> Vec<&'static str> {
        let mut v: Vec<_> = self
            .templates
            .iter()
            .flat_map(|t| t.pieces.iter())
            .filter_map(|p| match p {
                Piece::Word(w) => Some(*w),
                Piece::Slot { .. } => None,
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn filler_words(&self) -> Vec<&'static str> {
        let mut v: Vec<_> = self
            .fillers
            .values()
            .flat_map(|f| f.iter().flat_map(|p| p.split(' ')))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Template index → partner probability, for the shared templates.
    fn shared_templates(&self, ambiguity: f64) -> BTreeMap<usize, f64> {
        let a = ambiguity.clamp(0.0, 1.0);
        let count = (a * self.templates.len() as f64).round() as usize;
        self.shared_order[..count]
            .iter()
            .enumerate()
            .map(|(rank, &t)| (t, PARTNER_PROBS[rank % PARTNER_PROBS.len()]))
            .collect()
    }

    fn sample(&self, rng: &mut ChaCha8Rng, template: usize, partner: bool) -> (Vec<String>, ParseNode) {
        let t = &self.templates[template];
        let (intent, relabel): (&str, &[(&str, &str)]) = if partner {
            let (_, p, map) = PARTNERS
                .iter()
                .find(|(i, _, _)| *i == t.intent)
                .expect("every intent has a partner");
            (p, map)
        } else {
            (t.intent, &[])
        };
        let slot_label = |l: &str| -> String {
            relabel
                .iter()
                .find(|(from, _)| *from == l)
                .map_or(l, |(_, to)| to)
                .to_string()
        };
        let mut utterance = Vec::new();
        let mut root = ParseNode::intent(intent);
        for piece in &t.pieces {
            match piece {
                Piece::Word(w) => utterance.push(w.to_string()),
                Piece::Slot { label, nested } => {
                    let filler_slot = nested.map_or(*label, |(_, inner)| inner);
                    let options = self.fillers[filler_slot];
                    let filler = options[rng.random_range(0..options.len())];
                    utterance.extend(filler.split(' ').map(String::from));
                    let slot = match nested {
                        None => ParseNode::slot(&slot_label(label)).with_tokens(filler),
                        Some((inner_intent, inner_slot)) => ParseNode::slot(&slot_label(label))
                            .with_child(
                                ParseNode::intent(inner_intent)
                                    .with_child(ParseNode::slot(inner_slot).with_tokens(filler)),
                            ),
                    };
                    root = root.with_child(slot);
                }
            }
        }
        (utterance, root)
    }
}

fn parse_piece(p: &'static str) -> Piece {
    match p.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
        None => Piece::Word(p),
        Some(spec) => {
            let mut parts = spec.split('/');
            let label = parts.next().unwrap();
            let nested = match (parts.next(), parts.next()) {
                (Some(i), Some(s)) => Some((i, s)),
                _ => None,
            };
            Piece::Slot { label, nested }
        }
    }
}

/// `n` train-split examples; a pure function of its arguments.
pub fn generate_synthetic(grammar_seed: u64, n: usize, ambiguity: f64) -> Corpus {
    let grammar = Grammar::standard();
    let shared = grammar.shared_templates(ambiguity);
    let weights: Vec<f64> = grammar.templates.iter().map(|t| t.weight).collect();
    let pick = WeightedIndex::new(&weights).expect("positive template weights");
    let mut rng = ChaCha8Rng::seed_from_u64(grammar_seed);
    let examples = (0..n)
        .map(|i| {
            let t = pick.sample(&mut rng);
            let partner = match shared.get(&t) {
                Some(&p) => rng.random_bool(p),
                None => false,
            };
            let (utterance, root) = grammar.sample(&mut rng, t, partner);
            Example::new(i as u64, utterance, root)
        })
        .collect();
    Corpus::new(Split::Train, examples)
}

/// Train and eval splits drawn from one stream of `n_train + n_eval` examples.
pub fn generate_splits(
    grammar_seed: u64,
    n_train: usize,
    n_eval: usize,
    ambiguity: f64,
) -> (Corpus, Corpus) {
    let mut all = generate_synthetic(grammar_seed, n_train + n_eval, ambiguity).examples;
    let mut eval = all.split_off(n_train);
    for (i, ex) in eval.iter_mut().enumerate() {
        ex.id = i as u64;
    }
    (
        Corpus::new(Split::Train, all),
        Corpus::new(Split::Eval, eval),
    )
}
