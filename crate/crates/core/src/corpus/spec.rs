use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Walk,
    Run,
    TurnLeft,
    TurnRight,
    Jump,
    WaveLeft,
    WaveRight,
    Crouch,
    Spin,
    Idle,
}

impl Action {
    pub const ALL: [Action; 10] = [
        Action::Walk,
        Action::Run,
        Action::TurnLeft,
        Action::TurnRight,
        Action::Jump,
        Action::WaveLeft,
        Action::WaveRight,
        Action::Crouch,
        Action::Spin,
        Action::Idle,
    ];

    /// Whether the generator drives the feet with a stepping cycle.
    pub fn is_stepping(self) -> bool {
        matches!(self, Action::Walk | Action::Run | Action::TurnLeft | Action::TurnRight)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedLevel {
    Slow,
    Normal,
    Fast,
}

impl SpeedLevel {
    pub const ALL: [SpeedLevel; 3] = [SpeedLevel::Slow, SpeedLevel::Normal, SpeedLevel::Fast];

    pub(crate) fn index(self) -> usize {
        match self {
            SpeedLevel::Slow => 0,
            SpeedLevel::Normal => 1,
            SpeedLevel::Fast => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Bouncy,
    Stiff,
    Leaning,
    GiantStride,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Bouncy, Style::Stiff, Style::Leaning, Style::GiantStride];

    pub fn name(self) -> &'static str {
        match self {
            Style::Bouncy => "bouncy",
            Style::Stiff => "stiff",
            Style::Leaning => "leaning",
            Style::GiantStride => "giant_stride",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSpec {
    pub action: Action,
    pub speed: SpeedLevel,
    pub duration_frames: usize,
    pub style: Option<Style>,
}

/// Subject prefixes shared by corpus captions and inversion templates.
pub const SUBJECTS: [&str; 8] = [
    "the sim", "the man", "the woman", "figure", "someone", "he", "she", "a robot",
];

/// Word standing for the learned token in inversion templates.
pub const PLACEHOLDER: &str = "<*>";

pub fn template_count() -> usize {
    SUBJECTS.len()
}

/// Caption body for an (action, speed) pair.
pub fn phrase(action: Action, speed: SpeedLevel) -> &'static str {
    use Action::*;
    use SpeedLevel::*;
    match (action, speed) {
        (Walk, Slow) => "walks forward slowly",
        (Walk, Normal) => "walks forward",
        (Walk, Fast) => "walks forward quickly",
        (Run, Slow) => "runs forward slowly",
        (Run, Normal) => "runs forward",
        (Run, Fast) => "runs forward quickly",
        (TurnLeft, Slow) => "turns left slowly",
        (TurnLeft, Normal) => "turns left",
        (TurnLeft, Fast) => "turns left quickly",
        (TurnRight, Slow) => "turns right slowly",
        (TurnRight, Normal) => "turns right",
        (TurnRight, Fast) => "turns right quickly",
        (Jump, Slow) => "jumps in place slowly",
        (Jump, Normal) => "jumps in place",
        (Jump, Fast) => "jumps in place quickly",
        (WaveLeft, Slow) => "waves the left hand slowly",
        (WaveLeft, Normal) => "waves the left hand",
        (WaveLeft, Fast) => "waves the left hand quickly",
        (WaveRight, Slow) => "waves the right hand slowly",
        (WaveRight, Normal) => "waves the right hand",
        (WaveRight, Fast) => "waves the right hand quickly",
        (Crouch, Slow) => "crouches down slowly",
        (Crouch, Normal) => "crouches down",
        (Crouch, Fast) => "crouches down quickly",
        (Spin, Slow) => "spins around slowly",
        (Spin, Normal) => "spins around",
        (Spin, Fast) => "spins around quickly",
        (Idle, Slow) => "stands still calmly",
        (Idle, Normal) => "stands still",
        (Idle, Fast) => "stands still restlessly",
    }
}

/// `subject + " " + phrase + "."`; any style is left out of the text.
///
/// Panics if `template_id >= template_count()`.
pub fn render_caption(spec: &ActionSpec, template_id: usize) -> String {
    format!("{} {}.", SUBJECTS[template_id], phrase(spec.action, spec.speed))
}

/// Inversion template `subject + " <*>."`.
pub fn render_template(template_id: usize) -> String {
    format!("{} {PLACEHOLDER}.", SUBJECTS[template_id])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec(action: Action, speed: SpeedLevel) -> ActionSpec {
        ActionSpec {
            action,
            speed,
            duration_frames: 60,
            style: None,
        }
    }

    #[test]
    fn walk_caption_matches_template() {
        assert_eq!(
            render_caption(&spec(Action::Walk, SpeedLevel::Normal), 1),
            "the man walks forward."
        );
        assert_eq!(render_template(0), "the sim <*>.");
    }

    #[test]
    fn templates_change_only_the_subject() {
        let s = spec(Action::Jump, SpeedLevel::Fast);
        let a = render_caption(&s, 0);
        let b = render_caption(&s, 7);
        assert!(a.ends_with("jumps in place quickly."));
        assert_eq!(a.strip_prefix("the sim"), b.strip_prefix("a robot"));
    }

    #[test]
    fn style_is_not_rendered() {
        let mut s = spec(Action::Walk, SpeedLevel::Normal);
        let plain = render_caption(&s, 2);
        s.style = Some(Style::Bouncy);
        assert_eq!(render_caption(&s, 2), plain);
    }

    #[test]
    fn caption_bodies_are_injective() {
        let mut seen = HashSet::new();
        for a in Action::ALL {
            for s in SpeedLevel::ALL {
                assert!(seen.insert(phrase(a, s)), "duplicate body for {a:?} {s:?}");
            }
        }
    }
}
