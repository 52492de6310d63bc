//! Recursive-descent parser for the scene-description grammar
//! (see docs/grammar.md for the EBNF).

use super::{
    check_contradictions, render_local_description, DslError, ObjectSpec, RelationKind,
    RelationSpec, SceneDescription,
};
use crate::vocab;

/// Relation preposition patterns; matched longest-first after a verb.
pub(crate) const PREPOSITIONS: [(&[&str], RelationKind); 21] = [
    (&["on", "the", "left", "side", "of"], RelationKind::LeftOf),
    (&["on", "the", "right", "side", "of"], RelationKind::RightOf),
    (&["to", "the", "left", "of"], RelationKind::LeftOf),
    (&["to", "the", "right", "of"], RelationKind::RightOf),
    (&["on", "the", "left", "of"], RelationKind::LeftOf),
    (&["on", "the", "right", "of"], RelationKind::RightOf),
    (&["at", "the", "left", "of"], RelationKind::LeftOf),
    (&["at", "the", "right", "of"], RelationKind::RightOf),
    (&["left", "of"], RelationKind::LeftOf),
    (&["right", "of"], RelationKind::RightOf),
    (&["high", "above"], RelationKind::Above),
    (&["just", "above"], RelationKind::Above),
    (&["directly", "above"], RelationKind::Above),
    (&["up", "above"], RelationKind::Above),
    (&["above"], RelationKind::Above),
    (&["just", "below"], RelationKind::Below),
    (&["directly", "below"], RelationKind::Below),
    (&["below"], RelationKind::Below),
    (&["beneath"], RelationKind::Below),
    (&["underneath"], RelationKind::Below),
    (&["under"], RelationKind::Below),
];

/// Verb phrases allowed before a relation preposition; longest-first.
pub(crate) const VERBS: [&[&str]; 6] = [
    &["is", "placed"],
    &["is", "positioned"],
    &["is"],
    &["sits"],
    &["stands"],
    &["rests"],
];

struct Parser {
    tokens: Vec<(String, usize)>,
    pos: usize,
    text_len: usize,
    objects: Vec<ObjectSpec>,
    mention_positions: Vec<usize>,
    relations: Vec<RelationSpec>,
}

/// Outcome of parsing a noun phrase: the object's 1-based id and whether
/// this was its introduction.
struct NpResult {
    id: usize,
}

impl Parser {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, DslError> {
        let offset = self
            .tokens
            .get(self.pos)
            .map(|(_, o)| *o)
            .unwrap_or(self.text_len);
        Err(DslError::Parse { offset, message: message.into() })
    }

    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(|(t, _)| t.as_str())
    }

    fn peek_at(&self, ahead: usize) -> Option<&str> {
        self.tokens.get(self.pos + ahead).map(|(t, _)| t.as_str())
    }

    fn eat(&mut self, word: &str) -> bool {
        if self.peek() == Some(word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, word: &str) -> Result<(), DslError> {
        if self.eat(word) {
            Ok(())
        } else {
            self.err(format!("expected \"{word}\""))
        }
    }

    fn match_seq(&mut self, seq: &[&str]) -> bool {
        for (k, w) in seq.iter().enumerate() {
            if self.peek_at(k) != Some(w) {
                return false;
            }
        }
        self.pos += seq.len();
        true
    }

    /// intro_np := ("a"|"an") [color] noun — introduces a new object.
    /// ref_np := "the" [color] noun — refers back to an introduced one.
    fn noun_phrase(&mut self) -> Result<NpResult, DslError> {
        let intro = match self.peek() {
            Some("a") | Some("an") => {
                self.pos += 1;
                true
            }
            Some("the") => {
                self.pos += 1;
                false
            }
            _ => return self.err("expected \"a\", \"an\" or \"the\""),
        };

        let mut color: Option<String> = None;
        if let Some(w) = self.peek() {
            if vocab::color_index(w).is_some() {
                color = Some(w.to_string());
                self.pos += 1;
            }
        }

        let noun_pos = self.pos;
        let noun = match self.peek() {
            Some(w) if vocab::noun_index(w).is_some() => w.to_string(),
            Some(w) => return self.err(format!("\"{w}\" is not a known noun")),
            None => return self.err("expected a noun"),
        };

        let existing = self.objects.iter().position(|o| o.noun == noun);
        if intro {
            if existing.is_some() {
                return self.err(format!("\"{noun}\" introduced more than once"));
            }
            self.pos += 1;
            let id = self.objects.len() + 1;
            self.objects.push(ObjectSpec { id, noun, color });
            self.mention_positions.push(noun_pos);
            Ok(NpResult { id })
        } else {
            let Some(i) = existing else {
                return self.err(format!("\"the {noun}\" refers to nothing introduced earlier"));
            };
            if color.is_some() && color != self.objects[i].color {
                return self.err(format!("\"the {noun}\" does not match its introduction"));
            }
            self.pos += 1;
            Ok(NpResult { id: self.objects[i].id })
        }
    }

    /// clause := "there" "is" ["also"] intro_np
    ///         | np [verb rel_prep np]
    fn clause(&mut self) -> Result<(), DslError> {
        if self.peek() == Some("there") {
            self.pos += 1;
            self.expect("is")?;
            self.eat("also");
            match self.peek() {
                Some("a") | Some("an") => {
                    self.noun_phrase()?;
                    return Ok(());
                }
                _ => return self.err("expected an introduction after \"there is\""),
            }
        }

        let subject = self.noun_phrase()?;
        let has_verb = VERBS.iter().any(|v| self.match_seq(v));
        if !has_verb {
            // Bare enumeration clause, no relation.
            return Ok(());
        }

        let verb_end = self.pos;
        let kind = PREPOSITIONS
            .iter()
            .find(|(seq, _)| self.match_seq(seq))
            .map(|(_, k)| *k);
        let Some(kind) = kind else {
            self.pos = verb_end;
            return self.err("expected a relation after the verb");
        };

        let object = self.noun_phrase()?;
        if subject.id == object.id {
            return self.err("an object cannot relate to itself");
        }
        self.relations.push(RelationSpec {
            subject_id: subject.id,
            object_id: object.id,
            kind,
        });
        Ok(())
    }

    /// description := sentence+ ; sentence := clause (connective clause)* "."?
    /// connective := [","] ("and" | "while")
    fn description(&mut self) -> Result<(), DslError> {
        if self.tokens.is_empty() {
            return self.err("empty description");
        }
        loop {
            self.clause()?;
            loop {
                let comma = self.eat(",");
                if self.eat("and") || self.eat("while") {
                    self.clause()?;
                } else if comma {
                    return self.err("expected \"and\" or \"while\" after \",\"");
                } else {
                    break;
                }
            }
            if self.eat(".") {
                if self.pos == self.tokens.len() {
                    return Ok(());
                }
            } else if self.pos == self.tokens.len() {
                return Ok(());
            } else {
                return self.err("expected \".\", \"and\" or \"while\"");
            }
        }
    }
}

/// Parses a description into structured form. Objects are returned in
/// first-mention order with 1-based ids; relations are normalized so the
/// textual subject is `subject_id`.
pub fn parse_description(text: &str) -> Result<SceneDescription, DslError> {
    let mut p = Parser {
        tokens: vocab::tokenize(text),
        pos: 0,
        text_len: text.len(),
        objects: Vec::new(),
        mention_positions: Vec::new(),
        relations: Vec::new(),
    };
    // Reject any out-of-vocabulary token up front for a precise offset.
    for (tok, off) in &p.tokens {
        if vocab::token_id(tok).is_none() {
            return Err(DslError::Parse {
                offset: *off,
                message: format!("unknown token \"{tok}\""),
            });
        }
    }
    p.description()?;

    if !check_contradictions(&p.relations) {
        return Err(DslError::Contradiction(format!(
            "relations in \"{text}\" cannot all hold"
        )));
    }

    let local_texts = p.objects.iter().map(render_local_description).collect();
    Ok(SceneDescription {
        global_text: text.to_string(),
        objects: p.objects,
        relations: p.relations,
        local_texts,
        mention_token_positions: p.mention_positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_example() {
        let d = parse_description("a red car is to the left of a black mailbox").unwrap();
        assert_eq!(d.objects.len(), 2);
        assert_eq!(d.objects[0].noun, "car");
        assert_eq!(d.objects[0].color.as_deref(), Some("red"));
        assert_eq!(d.objects[1].noun, "mailbox");
        assert_eq!(d.objects[1].color.as_deref(), Some("black"));
        assert_eq!(d.relations.len(), 1);
        assert_eq!(d.relations[0].subject_id, 1);
        assert_eq!(d.relations[0].object_id, 2);
        assert_eq!(d.relations[0].kind, RelationKind::LeftOf);
        assert_eq!(d.local_texts[0], "A photo of a red car");
    }

    #[test]
    fn minimal_description() {
        let d = parse_description("a dog").unwrap();
        assert_eq!(d.objects.len(), 1);
        assert_eq!(d.objects[0].noun, "dog");
        assert_eq!(d.objects[0].color, None);
        assert!(d.relations.is_empty());
    }

    #[test]
    fn two_cycle_is_contradiction() {
        let e = parse_description("a cat is above a bed and the bed is above the cat");
        assert!(matches!(e, Err(DslError::Contradiction(_))));
    }

    #[test]
    fn mention_positions_point_at_nouns() {
        let d = parse_description("a red car is to the left of a black mailbox").unwrap();
        let toks = vocab::tokenize(&d.global_text);
        assert_eq!(toks[d.mention_token_positions[0]].0, "car");
        assert_eq!(toks[d.mention_token_positions[1]].0, "mailbox");
    }

    #[test]
    fn there_is_and_back_reference() {
        let d = parse_description(
            "there is a blue sofa, and a lamp sits just above the sofa.",
        )
        .unwrap();
        assert_eq!(d.objects.len(), 2);
        assert_eq!(d.relations.len(), 1);
        assert_eq!(d.relations[0].subject_id, 2);
        assert_eq!(d.relations[0].object_id, 1);
        assert_eq!(d.relations[0].kind, RelationKind::Above);
    }

    #[test]
    fn unknown_token_offset() {
        let e = parse_description("a red zeppelin").unwrap_err();
        match e {
            DslError::Parse { offset, .. } => assert_eq!(offset, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_introduction_rejected() {
        assert!(parse_description("a dog is above a dog").is_err());
    }

    #[test]
    fn dangling_reference_rejected() {
        assert!(parse_description("the dog is above a cat").is_err());
    }

    #[test]
    fn self_relation_rejected() {
        assert!(parse_description("a dog is above the dog").is_err());
    }

    #[test]
    fn all_preposition_patterns_parse() {
        for (seq, kind) in PREPOSITIONS {
            let text = format!("a car is {} a bus", seq.join(" "));
            let d = parse_description(&text).unwrap();
            assert_eq!(d.relations[0].kind, kind, "pattern {seq:?}");
        }
    }

    #[test]
    fn all_verb_forms_parse() {
        for verb in VERBS {
            let text = format!("a car {} above a bus", verb.join(" "));
            let d = parse_description(&text).unwrap();
            assert_eq!(d.relations[0].kind, RelationKind::Above, "verb {verb:?}");
        }
    }

    #[test]
    fn multi_sentence_description() {
        let d = parse_description(
            "A cake is left of a pizza. There is also a carrot, while a sandwich is under the cake.",
        )
        .unwrap();
        assert_eq!(d.objects.len(), 4);
        assert_eq!(d.relations.len(), 2);
        let nouns: Vec<&str> = d.objects.iter().map(|o| o.noun.as_str()).collect();
        assert_eq!(nouns, ["cake", "pizza", "carrot", "sandwich"]);
    }

    #[test]
    fn trailing_garbage_rejected() {
        assert!(parse_description("a dog the").is_err());
        assert!(parse_description("a dog and").is_err());
        assert!(parse_description("a dog ,").is_err());
    }
}
