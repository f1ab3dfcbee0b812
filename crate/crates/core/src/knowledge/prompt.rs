//! Scenario- and user-level prompt construction.
//!
//! Scenario prompts share every clause except the final distinction
//! instruction (and optional per-scenario expert knowledge). User prompts are
//! built from positive interactions only, capped at the `T` most recent per
//! scenario.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::Scope;
use crate::data::{positives_by_scenario, Dataset, Sample};
use crate::error::{Error, Result};

pub const COMMONALITY_INSTRUCTION: &str = "explicitly summarize the scenario commonality";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioInfo {
    pub name: String,
    pub interactions: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<u64>,
    /// Extra prior knowledge appended to this scenario's own prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_knowledge: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioStats {
    pub platform: String,
    pub platform_description: String,
    pub scenarios: Vec<ScenarioInfo>,
    pub users: u64,
    pub user_description: String,
    pub items: u64,
    pub item_description: String,
    pub overlapped_users: u64,
    pub overlapped_items: u64,
}

fn require(text: &str, what: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::Validation(format!("missing {what}")));
    }
    Ok(())
}

impl ScenarioStats {
    pub fn validate(&self) -> Result<()> {
        require(&self.platform, "platform name")?;
        require(&self.platform_description, "platform description")?;
        require(&self.user_description, "user description")?;
        require(&self.item_description, "item description")?;
        if self.scenarios.len() < 2 {
            return Err(Error::Validation("at least two scenarios are required".into()));
        }
        for (i, s) in self.scenarios.iter().enumerate() {
            require(&s.name, &format!("name of scenario {i}"))?;
        }
        let min_users = self.scenarios.iter().filter_map(|s| s.users).min().unwrap_or(self.users);
        let min_items = self.scenarios.iter().filter_map(|s| s.items).min().unwrap_or(self.items);
        if self.overlapped_users > min_users.min(self.users) {
            return Err(Error::Validation(format!(
                "overlapped_users {} exceeds per-scenario user count {}",
                self.overlapped_users,
                min_users.min(self.users)
            )));
        }
        if self.overlapped_items > min_items.min(self.items) {
            return Err(Error::Validation(format!(
                "overlapped_items {} exceeds per-scenario item count {}",
                self.overlapped_items,
                min_items.min(self.items)
            )));
        }
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("stats serialize");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Counts interactions, users, items and cross-scenario overlaps from a
    /// dataset. Items are read from the field named `item` when present.
    pub fn summarize(ds: &Dataset, platform: &str, scenario_names: &[String]) -> Result<Self> {
        let d = ds.schema.num_scenarios;
        if scenario_names.len() != d {
            return Err(Error::Validation(format!(
                "{} scenario names for {d} scenarios",
                scenario_names.len()
            )));
        }
        let item_field = ds.schema.fields.iter().position(|f| f.name == "item");
        let mut users: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); d];
        let mut items: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); d];
        let counts = ds.scenario_counts();
        for s in &ds.samples {
            users[s.domain()].insert(s.user());
            if let Some(f) = item_field {
                items[s.domain()].insert(s.features[f] as usize);
            }
        }
        let overlap = |sets: &[BTreeSet<usize>]| -> (u64, u64) {
            let mut seen: BTreeMap<_, usize> = BTreeMap::new();
            for set in sets {
                for x in set {
                    *seen.entry(x).or_default() += 1;
                }
            }
            (seen.len() as u64, seen.values().filter(|&&c| c > 1).count() as u64)
        };
        let (n_users, o_users) = overlap(&users);
        let (n_items, o_items) = overlap(&items);
        let stats = ScenarioStats {
            platform: platform.to_owned(),
            platform_description: "a platform serving several recommendation scenarios".into(),
            scenarios: (0..d)
                .map(|i| ScenarioInfo {
                    name: scenario_names[i].clone(),
                    interactions: counts[i] as u64,
                    users: Some(users[i].len() as u64),
                    items: Some(items[i].len() as u64),
                    expert_knowledge: None,
                })
                .collect(),
            users: n_users,
            user_description: "identified by anonymous ids".into(),
            items: n_items,
            item_description: "described by id and category".into(),
            overlapped_users: o_users,
            overlapped_items: o_items,
        };
        Ok(stats)
    }

    pub fn context(&self) -> PromptContext {
        PromptContext {
            platform: self.platform.clone(),
            scenario_names: self.scenarios.iter().map(|s| s.name.clone()).collect(),
        }
    }
}

/// The parts of the scenario statistics that user-level prompts mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptContext {
    pub platform: String,
    pub scenario_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub scope: Scope,
    pub id: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub no_history: bool,
}

fn count_word(n: usize) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS.get(n).map_or_else(|| n.to_string(), |w| (*w).to_owned())
}

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

pub fn build_scenario_prompt(stats: &ScenarioStats, d: usize) -> Result<PromptRecord> {
    stats.validate()?;
    let target = stats.scenarios.get(d).ok_or(Error::Routing {
        id: d,
        num_scenarios: stats.scenarios.len(),
    })?;
    let per_scenario: Vec<String> = stats
        .scenarios
        .iter()
        .map(|s| format!("{} interactions in {}", s.interactions, s.name))
        .collect();
    let mut text = format!(
        "On platform {}, {}, suppose there are {}. Besides, in these scenarios there are {} users {} \
         and {} items {} where {} users and {} products are overlapped. From the relationship among \
         these scenarios and statistics given, {} among the {} scenarios and the distinction of {}.",
        stats.platform,
        stats.platform_description,
        join_list(&per_scenario),
        stats.users,
        stats.user_description,
        stats.items,
        stats.item_description,
        stats.overlapped_users,
        stats.overlapped_items,
        COMMONALITY_INSTRUCTION,
        count_word(stats.scenarios.len()),
        target.name,
    );
    if let Some(extra) = target.expert_knowledge.as_deref().filter(|e| !e.trim().is_empty()) {
        text.push(' ');
        text.push_str(extra.trim());
    }
    Ok(PromptRecord {
        scope: Scope::Scenario,
        id: d,
        text,
        no_history: false,
    })
}

fn render_interaction(ds: &Dataset, s: &Sample) -> String {
    let attrs: Vec<String> = ds.schema.fields[2..]
        .iter()
        .zip(&s.features[2..])
        .map(|(f, v)| format!("{} {v}", f.name))
        .collect();
    format!("clicked [{}]", attrs.join(", "))
}

/// User-level prompt over the `threshold` most recent positives per scenario.
pub fn build_user_prompt(
    ds: &Dataset,
    ctx: &PromptContext,
    user: usize,
    threshold: usize,
) -> Result<PromptRecord> {
    if threshold == 0 {
        return Err(Error::Validation("positive-interaction threshold T must be >= 1".into()));
    }
    let d = ds.schema.num_scenarios;
    if ctx.scenario_names.len() != d {
        return Err(Error::Validation(format!(
            "{} scenario names for {d} scenarios",
            ctx.scenario_names.len()
        )));
    }
    let positives = positives_by_scenario(ds, user);
    if positives.is_empty() {
        return Ok(PromptRecord {
            scope: Scope::User,
            id: user,
            text: format!(
                "On platform {}, user_{user} has no positive interaction in any scenario.",
                ctx.platform
            ),
            no_history: true,
        });
    }
    let mut text = format!(
        "On platform {}, suppose there are {}.",
        ctx.platform,
        join_list(&ctx.scenario_names)
    );
    for (i, name) in ctx.scenario_names.iter().enumerate() {
        let subject = if i == 0 {
            format!("user_{user}")
        } else {
            "this user".to_owned()
        };
        let lead = if i == 0 { "In" } else { "Besides, in" };
        let behaviour = match positives.get(&i) {
            Some(list) => {
                let recent = &list[list.len().saturating_sub(threshold)..];
                recent.iter().map(|s| render_interaction(ds, s)).collect::<Vec<_>>().join("; ")
            }
            None => "has no positive interaction".to_owned(),
        };
        text.push_str(&format!(" {lead} {name}, {subject} {behaviour}."));
    }
    text.push_str(&format!(
        " For this user, considering the interaction frequency and item title plus description \
         information, if there is no interaction in some scenario, only summarize the interest in \
         the other scenarios. Otherwise, explicitly summarize the common interest among the {} \
         scenarios first, then summarize the distinct interest in each scenario.",
        count_word(d)
    ));
    Ok(PromptRecord {
        scope: Scope::User,
        id: user,
        text,
        no_history: false,
    })
}

/// All `D` scenario prompts followed by one prompt per user id.
pub fn build_all_prompts(ds: &Dataset, stats: &ScenarioStats, threshold: usize) -> Result<Vec<PromptRecord>> {
    if stats.scenarios.len() != ds.schema.num_scenarios {
        return Err(Error::Validation(format!(
            "stats describe {} scenarios, dataset has {}",
            stats.scenarios.len(),
            ds.schema.num_scenarios
        )));
    }
    let ctx = stats.context();
    let mut out = Vec::new();
    for d in 0..ds.schema.num_scenarios {
        out.push(build_scenario_prompt(stats, d)?);
    }
    for u in 0..ds.schema.num_users() {
        out.push(build_user_prompt(ds, &ctx, u, threshold)?);
    }
    Ok(out)
}

pub fn write_prompts_jsonl(records: &[PromptRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("prompt serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
