//! Topic names and subscription filters with `+` and `#` wildcards.

use std::collections::{BTreeMap, BTreeSet};

/// Topic names must be non-empty and wildcard-free.
pub fn valid_topic(t: &str) -> bool {
    !t.is_empty() && !t.contains(['+', '#', '\0'])
}

/// `#` only as the last level, wildcards only as whole levels.
pub fn valid_filter(f: &str) -> bool {
    if f.is_empty() || f.contains('\0') {
        return false;
    }
    let levels: Vec<&str> = f.split('/').collect();
    levels.iter().enumerate().all(|(i, l)| match *l {
        "#" => i == levels.len() - 1,
        "+" => true,
        l => !l.contains(['+', '#']),
    })
}

pub fn matches(filter: &str, topic: &str) -> bool {
    // Wildcards at the first level never match `$`-prefixed topics.
    if topic.starts_with('$') && (filter.starts_with('+') || filter.starts_with('#')) {
        return false;
    }
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

/// Filter → subscribers, with exact fan-out for a published topic.
#[derive(Debug, Clone, Default)]
pub struct TopicTable<K: Ord + Copy> {
    subs: BTreeMap<String, BTreeMap<K, u8>>,
}

impl<K: Ord + Copy> TopicTable<K> {
    pub fn new() -> Self {
        TopicTable {
            subs: BTreeMap::new(),
        }
    }

    pub fn subscribe(&mut self, filter: &str, who: K, qos: u8) {
        self.subs
            .entry(filter.to_string())
            .or_default()
            .insert(who, qos);
    }

    pub fn unsubscribe(&mut self, filter: &str, who: K) {
        if let Some(s) = self.subs.get_mut(filter) {
            s.remove(&who);
            if s.is_empty() {
                self.subs.remove(filter);
            }
        }
    }

    pub fn remove_all(&mut self, who: K) {
        self.subs.retain(|_, s| {
            s.remove(&who);
            !s.is_empty()
        });
    }

    /// Each subscriber appears once, with the highest qos among its
    /// matching filters.
    pub fn route(&self, topic: &str) -> BTreeMap<K, u8> {
        let mut out: BTreeMap<K, u8> = BTreeMap::new();
        for (f, s) in &self.subs {
            if matches(f, topic) {
                for (&k, &q) in s {
                    let e = out.entry(k).or_insert(q);
                    *e = (*e).max(q);
                }
            }
        }
        out
    }

    pub fn route_qos(&self, filter: &str, who: K) -> u8 {
        self.subs
            .get(filter)
            .and_then(|s| s.get(&who))
            .copied()
            .unwrap_or(0)
    }

    pub fn filters_of(&self, who: K) -> BTreeSet<String> {
        self.subs
            .iter()
            .filter(|(_, s)| s.contains_key(&who))
            .map(|(f, _)| f.clone())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wildcards() {
        assert!(matches("a/+/c", "a/b/c"));
        assert!(!matches("a/+/c", "a/b/d"));
        assert!(matches("a/#", "a"));
        assert!(matches("a/#", "a/b/c"));
        assert!(matches("#", "x/y"));
        assert!(!matches("a/b", "a/b/c"));
        assert!(!matches("+/x", "$SYS/x"));
        assert!(matches("+", "t"));
        assert!(!matches("+", "t/u"));
    }

    #[test]
    fn filter_validity() {
        assert!(valid_filter("a/+/#"));
        assert!(!valid_filter("a/#/b"));
        assert!(!valid_filter("a+/b"));
        assert!(!valid_topic("a/+"));
        assert!(valid_topic("a/b"));
    }

    #[test]
    fn overlapping_filters_deliver_once() {
        let mut t = TopicTable::new();
        t.subscribe("a/#", 1u64, 0);
        t.subscribe("a/b", 1, 1);
        t.subscribe("a/c", 2, 0);
        let r = t.route("a/b");
        assert_eq!(r.into_iter().collect::<Vec<_>>(), vec![(1, 1)]);
        t.remove_all(1);
        assert!(t.route("a/b").is_empty());
    }
}
