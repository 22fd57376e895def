use std::fmt;

use serde::{Deserialize, Serialize};

/// Input type of a branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    #[serde(rename = "v")]
    Visual,
    #[serde(rename = "t")]
    Textual,
    #[serde(rename = "id")]
    Id,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Visual, Branch::Textual, Branch::Id];

    pub fn tag(self) -> &'static str {
        match self {
            Branch::Visual => "v",
            Branch::Textual => "t",
            Branch::Id => "id",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One optional value per branch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerBranch<T> {
    pub v: Option<T>,
    pub t: Option<T>,
    pub id: Option<T>,
}

impl<T> PerBranch<T> {
    pub fn empty() -> Self {
        Self {
            v: None,
            t: None,
            id: None,
        }
    }

    pub fn get(&self, b: Branch) -> Option<&T> {
        match b {
            Branch::Visual => self.v.as_ref(),
            Branch::Textual => self.t.as_ref(),
            Branch::Id => self.id.as_ref(),
        }
    }

    pub fn get_mut(&mut self, b: Branch) -> Option<&mut T> {
        match b {
            Branch::Visual => self.v.as_mut(),
            Branch::Textual => self.t.as_mut(),
            Branch::Id => self.id.as_mut(),
        }
    }

    pub fn set(&mut self, b: Branch, value: T) {
        match b {
            Branch::Visual => self.v = Some(value),
            Branch::Textual => self.t = Some(value),
            Branch::Id => self.id = Some(value),
        }
    }

    /// Present entries in `v, t, id` order.
    pub fn iter(&self) -> impl Iterator<Item = (Branch, &T)> {
        Branch::ALL
            .into_iter()
            .filter_map(move |b| self.get(b).map(|x| (b, x)))
    }

    pub fn map<U>(&self, mut f: impl FnMut(Branch, &T) -> U) -> PerBranch<U> {
        let mut out = PerBranch::empty();
        for (b, x) in self.iter() {
            out.set(b, f(b, x));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
