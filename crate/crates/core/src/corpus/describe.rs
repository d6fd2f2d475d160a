use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::corpus::VideoSample;
use crate::error::{Error, Result};

/// Which prompt family a description request corresponds to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescribeMode {
    /// One-sentence key action description.
    Key,
    /// Detailed multi-clause description.
    Complete,
}

/// Anything that can produce an action description for a class name.
///
/// The default implementation is the deterministic class-keyed table below;
/// an HTTP client can be plugged in behind the same contract.
pub trait DescribeClient: Send + Sync {
    fn sentence(&self, class_name: &str, mode: DescribeMode) -> Result<String>;

    /// Action verbs registered for a class; used to bias masking. Clients
    /// without verb knowledge may return an empty list.
    fn verbs(&self, _class_name: &str) -> Vec<String> {
        Vec::new()
    }
}

/// One row of the description table.
#[derive(Clone, Debug)]
pub struct ClassDescription {
    pub class_name: String,
    pub key: String,
    pub complete: String,
    pub verbs: Vec<String>,
}

/// Class-keyed description table: the deterministic stand-in for a live
/// description model. Same class always yields the same sentences.
#[derive(Clone, Debug, Default)]
pub struct DescriptionTable {
    entries: Vec<ClassDescription>,
}

const BUILTIN: &[(&str, &str, &str, &str)] = &[
    ("BaseballPitch",
     "a pitcher winds up and throws a baseball toward the batter",
     "the pitcher stands on the mound winds up strides forward and hurls the ball with great speed toward the catcher while the batter prepares to swing",
     "throws,hurls,winds,strides"),
    ("BasketballDunk",
     "a player jumps high and dunks the basketball through the hoop",
     "the player dribbles toward the basket takes two quick steps jumps high above the rim and slams the ball down through the hoop with both hands",
     "jumps,dunks,dribbles,slams"),
    ("Billiards",
     "a person leans over the table and strikes a billiard ball with a cue",
     "the player leans over the green table lines up the cue stick carefully and strikes the white ball so it rolls across and knocks other balls into the pockets",
     "strikes,leans,rolls,knocks"),
    ("CleanAndJerk",
     "a weightlifter lifts a heavy barbell from the floor to overhead",
     "the athlete grips the loaded barbell pulls it explosively up to the shoulders pauses briefly then drives it overhead while splitting the legs and holds it steady",
     "lifts,grips,pulls,drives,holds"),
    ("CliffDiving",
     "a diver leaps from a high cliff and plunges into the water",
     "the diver stands at the edge of a tall rocky cliff leaps outward twists gracefully in the air and plunges feet first into the deep blue water below",
     "leaps,plunges,twists"),
    ("CricketBowling",
     "a bowler runs up and bowls a cricket ball toward the batsman",
     "the bowler sprints up to the crease swings the arm over in a full circle and releases the ball so it bounces once before reaching the batsman at the wicket",
     "bowls,sprints,swings,releases,bounces"),
    ("CricketShot",
     "a batsman swings the cricket bat and strikes the ball",
     "the batsman watches the bouncing ball closely steps forward swings the flat wooden bat through a wide arc and strikes the ball away across the grass field",
     "swings,strikes,steps,watches"),
    ("Diving",
     "a diver springs from the board and somersaults into the pool",
     "the diver bounces on the springboard rises high into the air somersaults twice tucks the body tightly then straightens and enters the pool with a small splash",
     "springs,somersaults,bounces,tucks,enters"),
    ("FrisbeeCatch",
     "a player runs and catches a flying frisbee",
     "the player sprints across the open field tracks the spinning disc against the sky stretches out both arms and catches the frisbee just before it touches the ground",
     "catches,sprints,tracks,stretches"),
    ("GolfSwing",
     "a golfer swings the club and drives the ball down the fairway",
     "the golfer addresses the small white ball shifts the weight back swings the long club in a smooth arc and drives the ball far down the open fairway",
     "swings,drives,shifts,addresses"),
    ("HammerThrow",
     "an athlete spins around and throws the heavy hammer",
     "the athlete grips the handle of the heavy hammer spins around several times inside the circle gaining speed and releases it so it flies far across the field",
     "throws,spins,grips,releases,flies"),
    ("HighJump",
     "an athlete sprints toward the bar and leaps over it",
     "the athlete takes a long curved run up plants one foot leaps upward arches the back over the high bar and lands safely on the thick soft mat",
     "leaps,sprints,plants,arches,lands"),
    ("JavelinThrow",
     "an athlete runs forward and hurls the javelin through the air",
     "the athlete sprints down the runway draws the long javelin back behind the shoulder and hurls it forward so it sails in a high arc and sticks into the grass",
     "hurls,sprints,draws,sails,sticks"),
    ("LongJump",
     "an athlete sprints down the runway and jumps into the sand pit",
     "the athlete sprints at full speed down the narrow runway plants a foot on the board jumps forward stretching both legs and lands in the soft sand pit",
     "jumps,sprints,plants,lands"),
    ("PoleVault",
     "an athlete plants a pole and vaults over the high bar",
     "the athlete charges down the runway plants the long flexible pole into the box swings upside down vaults high over the bar and falls onto the padded mat",
     "vaults,charges,plants,swings,falls"),
    ("Shotput",
     "an athlete pushes a heavy metal ball from the shoulder",
     "the athlete crouches inside the circle tucks the heavy metal ball against the neck spins once and pushes it powerfully from the shoulder so it lands in the dirt",
     "pushes,crouches,tucks,spins,lands"),
    ("SoccerPenalty",
     "a player kicks the soccer ball toward the goal from the penalty spot",
     "the player places the ball on the white penalty spot steps back takes a short run and kicks it hard toward the corner while the goalkeeper dives to block",
     "kicks,places,steps,dives"),
    ("TennisSwing",
     "a player swings the tennis racket and hits the ball over the net",
     "the player shuffles into position turns the shoulders swings the racket smoothly through the ball and hits it deep over the net onto the far court",
     "swings,hits,shuffles,turns"),
    ("ThrowDiscus",
     "an athlete spins in a circle and throws the discus",
     "the athlete stands in the throwing circle winds the arm back spins around with increasing speed and throws the flat heavy discus so it glides far through the air",
     "throws,spins,winds,glides"),
    ("VolleyballSpiking",
     "a player jumps at the net and spikes the volleyball",
     "the player approaches the net with quick steps jumps high above the tape swings an arm over the head and spikes the ball sharply down into the opposite court",
     "spikes,jumps,approaches,swings"),
];

impl DescriptionTable {
    /// Table for the first `n_classes` built-in action classes; classes past
    /// the built-in list get templated sentences.
    pub fn builtin(n_classes: usize) -> Self {
        let mut entries = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            if let Some((name, key, complete, verbs)) = BUILTIN.get(c) {
                entries.push(ClassDescription {
                    class_name: (*name).to_string(),
                    key: (*key).to_string(),
                    complete: (*complete).to_string(),
                    verbs: verbs.split(',').map(str::to_string).collect(),
                });
            } else {
                let tag = format!("motion{c}");
                entries.push(ClassDescription {
                    class_name: format!("Action{c}"),
                    key: format!("a person performs the {tag} routine with steady rhythm"),
                    complete: format!(
                        "the person begins the {tag} routine slowly continues the movement with \
                         full focus repeats the motion several times and finishes the sequence \
                         with a calm pause"
                    ),
                    verbs: vec!["performs".into(), "begins".into(), "repeats".into(), "finishes".into()],
                });
            }
        }
        DescriptionTable { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.class_name.clone()).collect()
    }

    pub fn entry(&self, class: usize) -> Option<&ClassDescription> {
        self.entries.get(class)
    }

    pub fn by_name(&self, class_name: &str) -> Option<&ClassDescription> {
        self.entries.iter().find(|e| e.class_name == class_name)
    }

    /// One line per class: `name\tkey\tcomplete\tverb,verb,...`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.class_name, e.key, e.complete, e.verbs.join(",")));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            if line.trim().is_empty() {
                offset += line.len() as u64 + 1;
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(Error::Format {
                    offset,
                    detail: format!("expected 4 tab-separated fields, got {}", parts.len()),
                });
            }
            entries.push(ClassDescription {
                class_name: parts[0].to_string(),
                key: parts[1].to_string(),
                complete: parts[2].to_string(),
                verbs: parts[3].split(',').filter(|v| !v.is_empty()).map(str::to_string).collect(),
            });
            offset += line.len() as u64 + 1;
        }
        Ok(DescriptionTable { entries })
    }
}

impl DescribeClient for DescriptionTable {
    fn sentence(&self, class_name: &str, mode: DescribeMode) -> Result<String> {
        let e = self
            .by_name(class_name)
            .ok_or_else(|| Error::arg("describe", format!("unknown class {class_name}")))?;
        Ok(match mode {
            DescribeMode::Key => e.key.clone(),
            DescribeMode::Complete => e.complete.clone(),
        })
    }

    fn verbs(&self, class_name: &str) -> Vec<String> {
        self.by_name(class_name).map(|e| e.verbs.clone()).unwrap_or_default()
    }
}

/// Instrumented front door for description requests.
///
/// Counts every call so the inference path can prove it never consulted the
/// generator (the call counter must read zero during evaluation).
pub struct DescriptionGenerator {
    class_names: Vec<String>,
    client: Box<dyn DescribeClient>,
    calls: AtomicU64,
}

impl DescriptionGenerator {
    pub fn stub(table: DescriptionTable) -> Self {
        let class_names = table.class_names();
        DescriptionGenerator { class_names, client: Box::new(table), calls: AtomicU64::new(0) }
    }

    pub fn with_client(class_names: Vec<String>, client: Box<dyn DescribeClient>) -> Self {
        DescriptionGenerator { class_names, client, calls: AtomicU64::new(0) }
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn check_class(&self, video: &VideoSample, cls: usize) -> Result<&str> {
        if cls >= self.class_names.len() {
            return Err(Error::arg("describe", format!("class id {cls} out of range")));
        }
        if video.label.get(cls).copied() != Some(1) {
            return Err(Error::arg(
                "describe",
                format!("class {} not positive in label of {}", self.class_names[cls], video.id),
            ));
        }
        Ok(&self.class_names[cls])
    }

    /// Key action description for a class the video contains, tokenized.
    pub fn describe_key(&self, video: &VideoSample, cls: usize) -> Result<Vec<String>> {
        let name = self.check_class(video, cls)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(super::text::tokenize(&self.client.sentence(name, DescribeMode::Key)?))
    }

    /// Detailed description for a class the video contains, tokenized.
    pub fn describe_complete(&self, video: &VideoSample, cls: usize) -> Result<Vec<String>> {
        let name = self.check_class(video, cls)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(super::text::tokenize(&self.client.sentence(name, DescribeMode::Complete)?))
    }

    /// Key description looked up by class id alone (class-keyed stub path for
    /// building the per-class query texts).
    pub fn key_text_for_class(&self, cls: usize) -> Result<Vec<String>> {
        let name = self
            .class_names
            .get(cls)
            .ok_or_else(|| Error::arg("describe", format!("class id {cls} out of range")))?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(super::text::tokenize(&self.client.sentence(name, DescribeMode::Key)?))
    }

    pub fn verbs_for_class(&self, cls: usize) -> Vec<String> {
        self.class_names.get(cls).map(|n| self.client.verbs(n)).unwrap_or_default()
    }
}
