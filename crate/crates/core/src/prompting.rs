//! Text prompts for base generation and demographic inpainting.
//!
//! Prompts keep the literal article of the occupation phrase even before
//! vowel-initial identifiers ("a Asian firefighter"), so the conditioning text
//! matches the bracketed template exactly.

use crate::dataset::{DemographicGroup, Gender, OccupationSpec};

pub const PROMPT_PREFIX: &str = "A photo of the face of";

pub const VQA_Q1_TEMPLATE: &str = "Is there a {occupation} in this image?";
pub const VQA_Q2: &str = "Are this person's limbs distorted?";
pub const VQA_Q3: &str = "Is this image real or fake?";

/// Detector query used to locate people before segmentation.
pub const PERSON_QUERY: &str = "person";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PromptTemplate {
    pub gender: Option<Gender>,
    pub group: Option<DemographicGroup>,
}

impl PromptTemplate {
    pub fn render(&self, occupation: &OccupationSpec) -> String {
        let (article, rest) = split_article(&occupation.prompt_phrase);
        let mut words: Vec<&str> = Vec::with_capacity(5);
        words.push(PROMPT_PREFIX);
        if let Some(a) = article {
            words.push(a);
        }
        // Race identifier first, then gender, then the occupation noun phrase.
        if let Some(g) = self.group {
            words.push(g.prompt_identifier());
        }
        if let Some(g) = self.gender {
            words.push(g.as_str());
        }
        words.push(rest);
        words.join(" ")
    }
}

fn split_article(phrase: &str) -> (Option<&str>, &str) {
    let phrase = phrase.trim();
    match phrase.split_once(' ') {
        Some((first, rest)) if matches!(first, "a" | "an" | "A" | "An" | "the" | "The") => {
            (Some(first), rest.trim_start())
        }
        _ => (None, phrase),
    }
}

pub fn build_base_prompt(occupation: &OccupationSpec, gender: Option<Gender>) -> String {
    PromptTemplate { gender, group: None }.render(occupation)
}

pub fn build_perturbed_prompt(
    occupation: &OccupationSpec,
    group: DemographicGroup,
    gender: Option<Gender>,
) -> String {
    PromptTemplate { gender, group: Some(group) }.render(occupation)
}

pub fn vqa_q1(occupation: &OccupationSpec) -> String {
    VQA_Q1_TEMPLATE.replace("{occupation}", &occupation.name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::default_occupations;
    use proptest::prelude::*;

    fn occ(name: &str) -> OccupationSpec {
        default_occupations().into_iter().find(|o| o.name == name).unwrap()
    }

    #[test]
    fn base_prompts() {
        assert_eq!(build_base_prompt(&occ("chef"), None), "A photo of the face of a chef in a chef's jacket");
        assert_eq!(build_base_prompt(&occ("firefighter"), Some(Gender::Female)), "A photo of the face of a female firefighter");
        assert_eq!(
            build_base_prompt(&occ("doctor"), None),
            "A photo of the face of a doctor in a white coat with a stethoscope"
        );
        assert_eq!(build_base_prompt(&occ("mechanic"), None), "A photo of the face of a car mechanic");
    }

    #[test]
    fn perturbed_prompts() {
        let ff = occ("firefighter");
        assert_eq!(build_perturbed_prompt(&ff, DemographicGroup::Black, None), "A photo of the face of a Black firefighter");
        assert_eq!(build_perturbed_prompt(&ff, DemographicGroup::EastAsian, None), "A photo of the face of a Asian firefighter");
        assert_eq!(
            build_perturbed_prompt(&occ("pilot"), DemographicGroup::Indian, Some(Gender::Female)),
            "A photo of the face of a Indian female commercial pilot"
        );
        assert_eq!(
            build_perturbed_prompt(&occ("chef"), DemographicGroup::Caucasian, None),
            "A photo of the face of a Caucasian chef in a chef's jacket"
        );
    }

    #[test]
    fn bare_pilot_phrase_composes_race_then_gender() {
        let pilot = OccupationSpec::new("pilot", "a pilot", &["a", "b", "c", "d", "e", "f", "g"]);
        assert_eq!(
            build_perturbed_prompt(&pilot, DemographicGroup::Indian, Some(Gender::Female)),
            "A photo of the face of a Indian female pilot"
        );
    }

    #[test]
    fn vqa_question() {
        assert_eq!(vqa_q1(&occ("chef")), "Is there a chef in this image?");
    }

    proptest! {
        #[test]
        fn removing_identifiers_recovers_base_phrase(
            oi in 0usize..5,
            gi in 0usize..4,
            gender in prop::option::of(prop::sample::select(Gender::BOTH.to_vec())),
        ) {
            let o = &default_occupations()[oi];
            let g = DemographicGroup::ALL[gi];
            let perturbed = build_perturbed_prompt(o, g, gender);
            let base = build_base_prompt(o, gender);
            let stripped = perturbed.replacen(&format!(" {}", g.prompt_identifier()), "", 1);
            prop_assert_eq!(&stripped, &base);
            let (_, noun) = split_article(&o.prompt_phrase);
            prop_assert!(perturbed.ends_with(noun));
        }
    }
}
