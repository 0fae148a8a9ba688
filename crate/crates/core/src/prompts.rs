//! Caption templates with species and background slots.

use crate::error::{Error, Result};

/// The ten caption templates, indexed from 1.
pub const TEMPLATES: [&str; 10] = [
    "A good photo of <CLS>.",
    "A photo of <CLS> in the <BG>.",
    "There is <CLS> on the <BG>",
    "There are some <CLS> lying in the <BG>.",
    "Some <CLS> are in the <BG>.",
    "A close photo of <CLS>.",
    "In the <BG>, there are several <CLS>.",
    "This is a clear photo of <CLS> in the <BG>.",
    "Several <CLS> are on the <BG>.",
    "A <CLS> stands on the <BG>.",
];

/// The eight background categories.
pub const BACKGROUNDS: [&str; 8] = [
    "grass or savanna",
    "forest or shrub",
    "mud or rock",
    "snowfield",
    "zoo or human habitation",
    "swamp or riverside",
    "desert or gobi",
    "mugshot",
];

/// Species words used by the synthetic dataset.
pub const SPECIES: [&str; 8] = ["dog", "cat", "horse", "tiger", "antelope", "bear", "zebra", "fox"];

/// Substitutes `<CLS>` and `<BG>` into template `template_id` (1..=10).
pub fn fill_prompt_template(template_id: usize, species: &str, background: &str) -> Result<String> {
    let t = template_id
        .checked_sub(1)
        .and_then(|i| TEMPLATES.get(i))
        .ok_or_else(|| Error::InvalidArgument(format!("unknown template id {template_id}")))?;
    Ok(t.replace("<CLS>", species).replace("<BG>", background))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_slot_optional() {
        assert_eq!(fill_prompt_template(6, "fox", "mud or rock").unwrap(), "A close photo of fox.");
        assert_eq!(fill_prompt_template(3, "fox", "snowfield").unwrap(), "There is fox on the snowfield");
    }

    #[test]
    fn unknown_ids_rejected() {
        assert!(fill_prompt_template(0, "a", "b").is_err());
        assert!(fill_prompt_template(11, "a", "b").is_err());
    }
}
