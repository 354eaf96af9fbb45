//! The seven instruction templates, their filler and their parser.
//!
//! Both directions are driven by the same piece lists, so anything
//! [`render_template`] produces is recovered exactly by [`parse_instruction`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::attrs::{Chars, Color, Direction, Shape, Texture, ANGLES};
use super::scene::{required_slots, SlotValue, TaskId, TaskSpec};
use crate::vocab::Vocab;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Piece {
    Lit(&'static str),
    /// chars slot + identifier slot, e.g. "red polka-dot block".
    Desc(&'static str, &'static str),
    /// chars slot only, e.g. "red polka-dot".
    Chars(&'static str),
    Dir(&'static str),
    Angle(&'static str),
}

use Piece::*;

fn lits(s: &'static str) -> impl Iterator<Item = Piece> {
    s.split_whitespace().map(Lit)
}

fn pieces(task: TaskId) -> Vec<Piece> {
    let mut p = Vec::new();
    match task {
        TaskId::T1 => {
            p.extend(lits("put all objects with the same attributes as"));
            p.push(Desc("chars", "container"));
            p.extend(lits("into it"));
        }
        TaskId::T2 => {
            p.extend(lits("first put the"));
            p.push(Desc("chars1", "object"));
            p.extend(lits("into the"));
            p.push(Desc("chars2", "container"));
            p.extend(lits("then put the object that was previously at its"));
            p.push(Dir("direction"));
            p.extend(lits("into the same container"));
        }
        TaskId::T3 => {
            p.extend(lits("put the"));
            p.push(Chars("chars1"));
            p.extend(lits("object in scene into the"));
            p.push(Chars("chars2"));
            p.push(Lit("object"));
        }
        TaskId::T4 => {
            p.extend(lits("put the"));
            p.push(Desc("chars1", "object"));
            p.extend(lits("into the"));
            p.push(Desc("chars2", "container2"));
            p.extend(lits("and then the"));
            p.push(Desc("chars3", "container3"));
            p.extend(lits("finally restore it into its original container"));
        }
        TaskId::T5 => {
            p.extend(lits("put the"));
            p.push(Desc("chars1", "object"));
            p.extend(lits("into the"));
            p.push(Desc("chars2", "container"));
        }
        TaskId::T6 => {
            p.push(Lit("rotate"));
            p.push(Desc("chars", "object"));
            p.push(Lit("by"));
            p.push(Angle("angle"));
            p.push(Lit("degrees"));
        }
        TaskId::T7 => {
            p.push(Lit("sweep"));
            p.push(Desc("chars1", "object"));
            p.extend(lits("into the"));
            p.push(Desc("chars2", "container"));
            p.extend(lits("without exceeding"));
            p.push(Desc("chars3", "constraint"));
        }
    }
    p
}

/// Every literal word used by any template, in first-use order.
pub fn template_words() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    for t in TaskId::ALL {
        for p in pieces(t) {
            if let Lit(w) = p {
                if !out.contains(&w) {
                    out.push(w);
                }
            }
        }
    }
    out
}

/// Lower-cases and collapses whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub tokens: Vec<usize>,
    pub slots: BTreeMap<String, SlotValue>,
}

impl Instruction {
    pub fn from_text(text: &str) -> Result<Self> {
        let text = normalize(text);
        let (_, slots) = parse_instruction(&text)?;
        let tokens = Vocab::standard().tokenize(&text)?;
        Ok(Self { text, tokens, slots })
    }
}

/// Fills the template of `task` with slot values.
pub fn render_template(task: TaskId, slots: &BTreeMap<String, SlotValue>) -> Result<String> {
    let missing = |slot: &str| Error::MissingSlot { task: task.to_string(), slot: slot.to_string() };
    let mut words: Vec<String> = Vec::new();
    for piece in pieces(task) {
        match piece {
            Lit(w) => words.push(w.to_string()),
            Desc(c, s) => {
                let Some(SlotValue::Chars(chars)) = slots.get(c) else { return Err(missing(c)) };
                let Some(SlotValue::Shape(shape)) = slots.get(s) else { return Err(missing(s)) };
                words.extend(chars.words().into_iter().map(String::from));
                words.push(shape.word().to_string());
            }
            Chars(c) => {
                let Some(SlotValue::Chars(chars)) = slots.get(c) else { return Err(missing(c)) };
                words.extend(chars.words().into_iter().map(String::from));
            }
            Dir(d) => {
                let Some(SlotValue::Direction(dir)) = slots.get(d) else { return Err(missing(d)) };
                words.push(dir.word().to_string());
            }
            Angle(a) => {
                let Some(SlotValue::Angle(angle)) = slots.get(a) else { return Err(missing(a)) };
                words.push(angle.to_string());
            }
        }
    }
    Ok(words.join(" "))
}

pub fn make_instruction(task: &TaskSpec) -> Result<Instruction> {
    for slot in required_slots(task.task_id) {
        if !task.slots.contains_key(*slot) {
            return Err(Error::MissingSlot { task: task.task_id.to_string(), slot: slot.to_string() });
        }
    }
    let text = render_template(task.task_id, &task.slots)?;
    let tokens = Vocab::standard().tokenize(&text)?;
    let slots = required_slots(task.task_id).iter().map(|s| (s.to_string(), task.slots[*s])).collect();
    Ok(Instruction { text, tokens, slots })
}

fn parse_chars(words: &[&str], i: &mut usize) -> Option<Chars> {
    let color = Color::from_word(words.get(*i)?)?;
    *i += 1;
    let texture = match words.get(*i).and_then(|w| Texture::from_word(w)) {
        Some(t) => {
            *i += 1;
            t
        }
        None => Texture::Plain,
    };
    Some(Chars::new(color, texture))
}

fn parse_with(task: TaskId, words: &[&str]) -> Option<BTreeMap<String, SlotValue>> {
    let mut slots = BTreeMap::new();
    let mut i = 0;
    for piece in pieces(task) {
        match piece {
            Lit(w) => {
                if words.get(i) != Some(&w) {
                    return None;
                }
                i += 1;
            }
            Desc(c, s) => {
                let chars = parse_chars(words, &mut i)?;
                let shape = Shape::from_word(words.get(i)?)?;
                i += 1;
                slots.insert(c.to_string(), SlotValue::Chars(chars));
                slots.insert(s.to_string(), SlotValue::Shape(shape));
            }
            Chars(c) => {
                let chars = parse_chars(words, &mut i)?;
                slots.insert(c.to_string(), SlotValue::Chars(chars));
            }
            Dir(d) => {
                let dir = Direction::from_word(words.get(i)?)?;
                i += 1;
                slots.insert(d.to_string(), SlotValue::Direction(dir));
            }
            Angle(a) => {
                let angle: u16 = words.get(i)?.parse().ok()?;
                if !ANGLES.contains(&angle) {
                    return None;
                }
                i += 1;
                slots.insert(a.to_string(), SlotValue::Angle(angle));
            }
        }
    }
    (i == words.len()).then_some(slots)
}

/// Recovers the task and slot values from instruction text.
pub fn parse_instruction(text: &str) -> Result<(TaskId, BTreeMap<String, SlotValue>)> {
    let norm = normalize(text);
    let words: Vec<&str> = norm.split(' ').filter(|w| !w.is_empty()).collect();
    TaskId::ALL
        .iter()
        .find_map(|&t| parse_with(t, &words).map(|s| (t, s)))
        .ok_or_else(|| Error::FormatError(format!("`{norm}` matches no instruction template")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::gen_scene;

    fn slots(pairs: &[(&str, SlotValue)]) -> TaskSpec {
        TaskSpec {
            task_id: TaskId::T1,
            slots: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            roles: BTreeMap::new(),
        }
    }

    #[test]
    fn t5_fill() {
        let mut t = slots(&[
            ("chars1", SlotValue::Chars(Chars::new(Color::Red, Texture::Plain))),
            ("object", SlotValue::Shape(Shape::Block)),
            ("chars2", SlotValue::Chars(Chars::new(Color::Green, Texture::Plain))),
            ("container", SlotValue::Shape(Shape::Bowl)),
        ]);
        t.task_id = TaskId::T5;
        assert_eq!(make_instruction(&t).unwrap().text, "put the red block into the green bowl");
    }

    #[test]
    fn t6_fill() {
        let mut t = slots(&[
            ("chars", SlotValue::Chars(Chars::new(Color::Blue, Texture::PolkaDot))),
            ("object", SlotValue::Shape(Shape::Flower)),
            ("angle", SlotValue::Angle(60)),
        ]);
        t.task_id = TaskId::T6;
        assert_eq!(make_instruction(&t).unwrap().text, "rotate blue polka-dot flower by 60 degrees");
    }

    #[test]
    fn t7_ends_with_constraint() {
        let (_, mut spec) = gen_scene(TaskId::T7, 5, (8, 8)).unwrap();
        spec.slots.insert("chars3".into(), SlotValue::Chars(Chars::new(Color::Yellow, Texture::Plain)));
        let text = make_instruction(&spec).unwrap().text;
        assert!(text.ends_with("without exceeding yellow line"), "{text}");
    }

    #[test]
    fn missing_slot_is_reported() {
        let mut t = slots(&[("chars", SlotValue::Chars(Chars::new(Color::Blue, Texture::Plain)))]);
        t.task_id = TaskId::T6;
        assert!(matches!(make_instruction(&t), Err(Error::MissingSlot { .. })));
    }

    #[test]
    fn parse_inverts_fill_for_generated_tasks() {
        for task in TaskId::ALL {
            for seed in 0..40 {
                let (_, spec) = gen_scene(task, seed, (8, 8)).unwrap();
                let instr = make_instruction(&spec).unwrap();
                let (t, s) = parse_instruction(&instr.text).unwrap();
                assert_eq!(t, task);
                assert_eq!(s, instr.slots);
                assert_eq!(render_template(t, &s).unwrap(), instr.text);
                assert_eq!(Vocab::standard().detokenize(&instr.tokens).unwrap(), instr.text);
            }
        }
    }

    #[test]
    fn garbage_does_not_parse() {
        assert!(parse_instruction("put the red block").is_err());
        assert!(parse_instruction("rotate red block by 45 degrees").is_err());
    }
}
