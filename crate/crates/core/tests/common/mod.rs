//! Shared fixtures for the integration suites: the showcase histories the
//! golden files transcribe, plus a synthetic dataset generator for
//! pipeline-level runs.
#![allow(dead_code)] // each integration target uses a different subset

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use recpipe_core::model::{HistoryEntry, Interaction, Item, UserHistory};

pub struct EntrySpec {
    pub title: &'static str,
    pub attrs: &'static [(&'static str, &'static str)],
    pub review: Option<&'static str>,
    pub rating: Option<f64>,
}

pub fn history_from_specs(dataset_id: &str, user_id: &str, specs: &[EntrySpec]) -> UserHistory {
    let entries = specs
        .iter()
        .enumerate()
        .map(|(n, spec)| {
            let mut item = Item::new(format!("{dataset_id}-i{n}"), spec.title);
            for (key, value) in spec.attrs {
                item = item.with_attr(*key, *value);
            }
            HistoryEntry {
                item,
                interaction: Interaction {
                    user_id: user_id.to_string(),
                    item_id: format!("{dataset_id}-i{n}"),
                    rating: spec.rating,
                    review: spec.review.map(str::to_string),
                    timestamp: Some(n as i64),
                    dataset_id: dataset_id.to_string(),
                },
            }
        })
        .collect();
    UserHistory { user_id: user_id.to_string(), dataset_id: dataset_id.to_string(), entries }
}

/// The showcase pre-training history (first three items).
pub fn showcase_pretrain_history() -> UserHistory {
    history_from_specs(
        "amazon",
        "showcase-pretrain",
        &[
            EntrySpec {
                title: "Rock-a-Stack",
                attrs: &[("brand", "Fisher-Price")],
                review: Some(
                    "My son loves to empty this stacker and play with and teeth on the rings",
                ),
                rating: Some(5.0),
            },
            EntrySpec {
                title: "Jumbo Puzzle",
                attrs: &[("brand", "Melissa & Doug")],
                review: Some(
                    "My niece love this puzzle at my parents house so I had to have it for my son. A classic!",
                ),
                rating: Some(5.0),
            },
            EntrySpec {
                title: "So Big Crayons",
                attrs: &[("brand", "Crayola")],
                review: Some("Good quality as expected from Crayola and easy enough for him to grasp."),
                rating: Some(5.0),
            },
        ],
    )
}

/// The showcase fine-tuning history: both instruction samples derive from
/// this five-item sequence (rating label = second-last, next item = last).
pub fn showcase_finetune_history() -> UserHistory {
    history_from_specs(
        "amazon",
        "showcase-finetune",
        &[
            EntrySpec {
                title: "Frankenweenie Figure",
                attrs: &[("brand", "Disney")],
                review: Some("My daughter loves Frankenweenie & I was super excited to find Sparky on here"),
                rating: Some(5.0),
            },
            EntrySpec {
                title: "Rubber Ghost Face",
                attrs: &[("brand", "Fun World")],
                review: Some(
                    "The rubber is so flimsy it literally flaps in the wind when you move your hand while holding it.",
                ),
                rating: Some(2.0),
            },
            EntrySpec {
                title: "Makeup Signature Set",
                attrs: &[("brand", "LCosmetics")],
                review: Some(
                    "The rubber is so flimsy it literally flaps in the wind when you move your hand while holding it.",
                ),
                rating: Some(4.0),
            },
            EntrySpec {
                title: "Hive Building Sets",
                attrs: &[("brand", "HEXBUG")],
                review: Some("It is fun & my daughter loves it"),
                rating: Some(4.0),
            },
            EntrySpec {
                title: "Animal Hats",
                attrs: &[("brand", "ZoopurPets")],
                review: None,
                rating: None,
            },
        ],
    )
}

/// One three-entry fixture history per template domain, with every field
/// the domain's templates can render populated.
pub fn domain_fixture(domain_id: &str) -> UserHistory {
    let specs: &[EntrySpec] = match domain_id {
        "amazon" => &[
            EntrySpec {
                title: "Wooden Train Set",
                attrs: &[("brand", "BRIO")],
                review: Some("Sturdy tracks and my toddler plays with it daily"),
                rating: Some(5.0),
            },
            EntrySpec {
                title: "Stacking Cups",
                attrs: &[("brand", "Munchkin")],
                review: Some("Simple and durable bath toy"),
                rating: Some(4.0),
            },
            EntrySpec {
                title: "Animal Puzzle",
                attrs: &[("brand", "Melissa & Doug")],
                review: Some("Pieces fit well"),
                rating: Some(5.0),
            },
        ],
        "amazon_books" => &[
            EntrySpec {
                title: "The Silent Ocean",
                attrs: &[("brand", "Ada Quill"), ("author", "Ada Quill")],
                review: Some("Could not put it down"),
                rating: Some(5.0),
            },
            EntrySpec {
                title: "Maps of Nowhere",
                attrs: &[("brand", "Tom Hollow"), ("author", "Tom Hollow")],
                review: Some("Slow start but strong finish"),
                rating: Some(3.0),
            },
            EntrySpec {
                title: "Glass Harvest",
                attrs: &[("brand", "Ivy Marsh"), ("author", "Ivy Marsh")],
                review: Some("A quiet, strange delight"),
                rating: Some(4.0),
            },
        ],
        "anime" => &[
            EntrySpec {
                title: "Steel Alchemist",
                attrs: &[("genres", "Action, Adventure, Fantasy")],
                review: None,
                rating: Some(9.0),
            },
            EntrySpec {
                title: "Slice of Stars",
                attrs: &[("genres", "Comedy, Sci-Fi")],
                review: None,
                rating: Some(7.0),
            },
            EntrySpec {
                title: "Monsoon Diary",
                attrs: &[("genres", "Drama, Romance")],
                review: None,
                rating: Some(8.0),
            },
        ],
        "bookcrossing" => &[
            EntrySpec {
                title: "The Winter Garden",
                attrs: &[("author", "Nora Pike")],
                review: None,
                rating: Some(8.0),
            },
            EntrySpec {
                title: "Salt Roads",
                attrs: &[("author", "Ezra Stone")],
                review: None,
                rating: Some(6.0),
            },
            EntrySpec {
                title: "Paper Lanterns",
                attrs: &[("author", "June Ashby")],
                review: None,
                rating: Some(9.0),
            },
        ],
        "food" => &[
            EntrySpec {
                title: "Lemon Drizzle Cake",
                attrs: &[],
                review: Some("Came out moist and tangy"),
                rating: Some(5.0),
            },
            EntrySpec {
                title: "Weeknight Chili",
                attrs: &[],
                review: Some("Needed more spice for our taste"),
                rating: Some(3.0),
            },
            EntrySpec {
                title: "Garlic Butter Noodles",
                attrs: &[],
                review: Some("Fast and comforting"),
                rating: Some(4.0),
            },
        ],
        "goodreads" => &[
            EntrySpec {
                title: "River of Doors",
                attrs: &[("author", "Mira Voss"), ("genres", "Fantasy")],
                review: Some("A generous, strange epic"),
                rating: Some(5.0),
            },
            EntrySpec {
                title: "The Clockmaker's Debt",
                attrs: &[("author", "Leo Brant"), ("genres", "Mystery, Historical")],
                review: Some("Tidy plotting, flat ending"),
                rating: Some(3.0),
            },
            EntrySpec {
                title: "Half-Light Atlas",
                attrs: &[("author", "Sena Kord"), ("genres", "Science Fiction")],
                review: Some("Ideas for days"),
                rating: Some(4.0),
            },
        ],
        "hotelrec" => &[
            EntrySpec {
                title: "Harbor View Inn",
                attrs: &[("city", "Lisbon")],
                review: Some("Bright rooms and a generous breakfast"),
                rating: Some(5.0),
            },
            EntrySpec {
                title: "Station Plaza Hotel",
                attrs: &[("city", "Prague")],
                review: Some("Thin walls, great location"),
                rating: Some(3.0),
            },
            EntrySpec {
                title: "Cedar Lodge",
                attrs: &[("city", "Banff")],
                review: Some("Quiet and close to the trails"),
                rating: Some(5.0),
            },
        ],
        "movielens" => &[
            EntrySpec {
                title: "Heat",
                attrs: &[("genres", "Action|Crime|Thriller")],
                review: None,
                rating: Some(5.0),
            },
            EntrySpec {
                title: "Before Sunrise",
                attrs: &[("genres", "Drama|Romance")],
                review: None,
                rating: Some(4.0),
            },
            EntrySpec {
                title: "Spirited Away",
                attrs: &[("genres", "Animation|Adventure|Fantasy")],
                review: None,
                rating: Some(5.0),
            },
        ],
        "netflix" => &[
            EntrySpec { title: "The Queen's Favor", attrs: &[], review: None, rating: Some(4.0) },
            EntrySpec { title: "Midnight Circuit", attrs: &[], review: None, rating: Some(3.0) },
            EntrySpec { title: "Paper Moon Rising", attrs: &[], review: None, rating: Some(5.0) },
        ],
        "steam" => &[
            EntrySpec { title: "Portal 2", attrs: &[], review: None, rating: None },
            EntrySpec { title: "Hollow Knight", attrs: &[], review: None, rating: None },
            EntrySpec { title: "Stardew Valley", attrs: &[], review: None, rating: None },
        ],
        "wikirec" => &[
            EntrySpec {
                title: "Alan Turing",
                attrs: &[("description", "English mathematician and computer scientist")],
                review: None,
                rating: None,
            },
            EntrySpec {
                title: "Enigma machine",
                attrs: &[("description", "Cipher device used in the early- to mid-20th century")],
                review: None,
                rating: None,
            },
            EntrySpec {
                title: "Bletchley Park",
                attrs: &[("description", "English country house used for Allied code-breaking")],
                review: None,
                rating: None,
            },
        ],
        "yelp" => &[
            EntrySpec {
                title: "Blue Finch Cafe",
                attrs: &[("city", "Portland")],
                review: Some("Great pour-over and friendly staff"),
                rating: Some(5.0),
            },
            EntrySpec {
                title: "Taqueria del Sol",
                attrs: &[("city", "Austin")],
                review: Some("Salsa bar alone is worth the trip"),
                rating: Some(4.0),
            },
            EntrySpec {
                title: "Noodle Union",
                attrs: &[("city", "Seattle")],
                review: Some("Broth was lukewarm at lunch"),
                rating: Some(3.0),
            },
        ],
        other => panic!("no fixture for domain {other}"),
    };
    history_from_specs(domain_id, &format!("fixture-{domain_id}"), specs)
}

pub const ALL_DOMAINS: [&str; 12] = [
    "amazon",
    "amazon_books",
    "anime",
    "bookcrossing",
    "food",
    "goodreads",
    "hotelrec",
    "movielens",
    "netflix",
    "steam",
    "wikirec",
    "yelp",
];

pub fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/goldens").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("golden {}: {e}", path.display()))
}

/// Writes a synthetic amazon-style dataset (JSONL + descriptor) usable by
/// the ingest pipeline. Every user gets `per_user` interactions over a
/// shared catalog of `n_items` uniquely-titled items. Deterministic.
pub fn write_synthetic_dataset(
    dir: &Path,
    dataset_id: &str,
    n_users: usize,
    n_items: usize,
    per_user: usize,
) -> (PathBuf, PathBuf) {
    std::fs::create_dir_all(dir).unwrap();
    let descriptor_path = dir.join(format!("{dataset_id}-descriptor.json"));
    let field_map: BTreeMap<&str, &str> = [
        ("reviewer", "user_id"),
        ("asin", "item_id"),
        ("product", "title"),
        ("maker", "brand"),
        ("stars", "rating"),
        ("comment", "review"),
        ("time", "timestamp"),
    ]
    .into_iter()
    .collect();
    let descriptor = serde_json::json!({
        "dataset_id": dataset_id,
        "source_format": "jsonl",
        "field_map": field_map,
        "template": "amazon",
    });
    std::fs::write(&descriptor_path, serde_json::to_string_pretty(&descriptor).unwrap()).unwrap();

    let input_path = dir.join(format!("{dataset_id}-reviews.jsonl"));
    let mut lines = Vec::new();
    assert!(per_user <= n_items, "per-user interactions would repeat items");
    for u in 0..n_users {
        for k in 0..per_user {
            let item = (u * per_user + k) % n_items;
            let rating = 1 + (u + k) % 5;
            lines.push(
                serde_json::json!({
                    "reviewer": format!("user{u:04}"),
                    "asin": format!("item{item:04}"),
                    "product": format!("Distinct Product Number {item}"),
                    "maker": format!("Brand{}", item % 7),
                    "stars": format!("{rating}.0"),
                    "comment": format!("Review text {u} {k} about product {item}"),
                    "time": format!("{}", 1_500_000_000 + u * 1000 + k),
                })
                .to_string(),
            );
        }
    }
    std::fs::write(&input_path, lines.join("\n")).unwrap();
    (descriptor_path, input_path)
}
