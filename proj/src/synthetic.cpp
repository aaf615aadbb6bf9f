#include <algorithm>
#include <set>

#include "json.hpp"
#include "morpheus/corpus.hpp"
#include "morpheus/random.hpp"

namespace morpheus::corpus {

namespace {

std::string fill(std::string_view tmpl, std::string_view value) {
  std::string out(tmpl);
  const std::string key = "{v}";
  for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size())) {
    out.replace(pos, key.size(), value);
  }
  return out;
}

}  // namespace

SyntheticSpec SyntheticSpec::default_spec() {
  SyntheticSpec spec;
  spec.slots = {
      {"hobby",
       {"hiking", "swimming", "painting", "chess", "cooking", "gardening"},
       {"i enjoy {v}.", "in my free time i like {v}."},
       "what do you do for fun ?",
       "i enjoy {v} .",
       {"i spent the weekend walking mountain trails .", "i was at the pool all morning .",
        "my new canvas and brushes arrived .", "i studied a few openings last night .",
        "i tried a new recipe for dinner .", "my tomatoes are finally growing ."}},
      {"job",
       {"teacher", "nurse", "farmer", "pilot", "lawyer", "engineer"},
       {"i work as a {v}.", "my job is {v}."},
       "what is your job ?",
       "i am a {v} .",
       {"my students had an exam today .", "the hospital shift was long .",
        "the harvest kept me busy .", "my flight landed late last night .",
        "the court case ran long .", "the bridge design finally passed review ."}},
      {"pet",
       {"dog", "cat", "parrot", "rabbit", "horse", "fish"},
       {"i have a pet {v}.", "i live with my {v}."},
       "do you have any pets ?",
       "i have a {v} .",
       {"i took my puppy for a long walk .", "my kitten knocked a glass off the table .",
        "my bird learned a new word .", "my bunny chewed through a cable .",
        "i cleaned the stable this morning .", "i cleaned the aquarium tank ."}},
      {"food",
       {"pizza", "sushi", "pasta", "tacos", "curry", "salad"},
       {"my favorite food is {v}.", "i could eat {v} every day."},
       "what food do you like ?",
       "i love {v} .",
       {"i ordered a large pepperoni pie .", "we had raw fish and rice rolls .",
        "i made spaghetti with meatballs .", "we grabbed tortillas from the food truck .",
        "the spicy indian place was great .", "i had a bowl of fresh greens ."}},
  };
  spec.small_talk = {"how was your day ?", "what have you been up to ?", "anything new with you ?",
                     "how is it going ?"};
  return spec;
}

void SyntheticSpec::validate() const {
  if (roles_count < 3) {
    throw UsageError("synthetic spec: roles_count must be at least 3 for disjoint splits");
  }
  if (slots.empty()) throw UsageError("synthetic spec: no attribute slots");
  if (small_talk.empty()) throw UsageError("synthetic spec: no small-talk utterances");
  if (turns_per_dialogue < 1 || turns_per_dialogue > static_cast<int>(slots.size())) {
    throw UsageError("synthetic spec: turns_per_dialogue must be in [1, slot count]");
  }
  if (dialogues_per_role < 1) throw UsageError("synthetic spec: dialogues_per_role must be >= 1");
  if (!(hint_rate >= 0.0 && hint_rate <= 1.0)) throw UsageError("synthetic spec: hint_rate must be in [0, 1]");
  if (valid_fraction < 0 || test_fraction <= 0 || valid_fraction + test_fraction >= 1) {
    throw UsageError("synthetic spec: invalid split fractions");
  }
  double combos = 1;
  for (const auto& s : slots) {
    if (s.values.empty() || s.persona_templates.empty() || s.hints.size() != s.values.size()) {
      throw UsageError("synthetic spec: slot '" + s.name + "' is incomplete");
    }
    combos *= static_cast<double>(s.values.size());
  }
  if (combos < roles_count) throw UsageError("synthetic spec: fewer attribute combinations than roles");
}

SyntheticSpec SyntheticSpec::from_json(std::string_view text) {
  using nlohmann::json;
  SyntheticSpec spec = default_spec();
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("synthetic spec: ") + e.what());
  }
  try {
    if (doc.contains("slots")) {
      spec.slots.clear();
      for (const auto& s : doc["slots"]) {
        spec.slots.push_back({s.at("name").get<std::string>(),
                              s.at("values").get<std::vector<std::string>>(),
                              s.at("persona_templates").get<std::vector<std::string>>(),
                              s.at("question").get<std::string>(),
                              s.at("answer_template").get<std::string>(),
                              s.at("hints").get<std::vector<std::string>>()});
      }
    }
    if (doc.contains("small_talk")) spec.small_talk = doc["small_talk"].get<std::vector<std::string>>();
    if (doc.contains("roles_count")) spec.roles_count = doc["roles_count"].get<int>();
    if (doc.contains("turns_per_dialogue")) spec.turns_per_dialogue = doc["turns_per_dialogue"].get<int>();
    if (doc.contains("dialogues_per_role")) spec.dialogues_per_role = doc["dialogues_per_role"].get<int>();
    if (doc.contains("hint_rate")) spec.hint_rate = doc["hint_rate"].get<double>();
    if (doc.contains("valid_fraction")) spec.valid_fraction = doc["valid_fraction"].get<double>();
    if (doc.contains("test_fraction")) spec.test_fraction = doc["test_fraction"].get<double>();
    if (doc.contains("seed")) spec.seed = doc["seed"].get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("synthetic spec: ") + e.what());
  }
  return spec;
}

std::string SyntheticSpec::to_json() const {
  using nlohmann::json;
  json slots_json = json::array();
  for (const auto& s : slots) {
    slots_json.push_back({{"name", s.name},
                          {"values", s.values},
                          {"persona_templates", s.persona_templates},
                          {"question", s.question},
                          {"answer_template", s.answer_template},
                          {"hints", s.hints}});
  }
  json doc = {{"slots", slots_json},
              {"small_talk", small_talk},
              {"roles_count", roles_count},
              {"turns_per_dialogue", turns_per_dialogue},
              {"dialogues_per_role", dialogues_per_role},
              {"hint_rate", hint_rate},
              {"valid_fraction", valid_fraction},
              {"test_fraction", test_fraction},
              {"seed", seed}};
  return doc.dump(2);
}

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t slot_count = spec.slots.size();

  // Distinct attribute combinations, one per role.
  std::set<std::vector<std::size_t>> seen;
  std::vector<SyntheticRole> roles;
  std::vector<std::vector<std::string>> personas;
  while (static_cast<int>(roles.size()) < spec.roles_count) {
    std::vector<std::size_t> combo(slot_count);
    for (std::size_t s = 0; s < slot_count; ++s) combo[s] = uniform_index(rng, spec.slots[s].values.size());
    if (!seen.insert(combo).second) continue;
    char id[32];
    std::snprintf(id, sizeof id, "role_%03zu", roles.size());
    std::vector<std::string> persona;
    for (std::size_t s = 0; s < slot_count; ++s) {
      const auto& slot = spec.slots[s];
      const auto& tmpl = slot.persona_templates[uniform_index(rng, slot.persona_templates.size())];
      persona.push_back(fill(tmpl, slot.values[combo[s]]));
    }
    roles.push_back({id, std::move(combo)});
    personas.push_back(std::move(persona));
  }

  std::vector<std::size_t> order(roles.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, rng);
  const auto r = static_cast<std::size_t>(spec.roles_count);
  const std::size_t n_test = std::max<std::size_t>(1, static_cast<std::size_t>(spec.test_fraction * r + 0.5));
  const std::size_t n_valid = std::max<std::size_t>(1, static_cast<std::size_t>(spec.valid_fraction * r + 0.5));
  if (n_test + n_valid >= r) throw UsageError("synthetic spec: too few roles for three splits");

  SyntheticCorpus out;
  auto make_dialogues = [&](std::size_t role_index, std::vector<DialogueSample>& dest) {
    const auto& role = roles[role_index];
    for (int d = 0; d < spec.dialogues_per_role; ++d) {
      const std::size_t asked = static_cast<std::size_t>(d) % slot_count;
      std::vector<std::size_t> others;
      for (std::size_t s = 0; s < slot_count; ++s) {
        if (s != asked) others.push_back(s);
      }
      shuffle(others, rng);
      const bool hint_asked = uniform01(rng) < spec.hint_rate;
      std::vector<std::size_t> hinted;
      if (hint_asked) hinted.push_back(asked);
      for (std::size_t t = 0; t < others.size() && hinted.size() < static_cast<std::size_t>(spec.turns_per_dialogue); ++t) {
        hinted.push_back(others[t]);
      }
      shuffle(hinted, rng);

      DialogueSample sample;
      sample.persona_sentences = personas[role_index];
      sample.responder_id = role.id;
      for (std::size_t s : hinted) {
        sample.history.push_back({"user", spec.small_talk[uniform_index(rng, spec.small_talk.size())]});
        sample.history.push_back({role.id, spec.slots[s].hints[role.value_index[s]]});
      }
      const auto& slot = spec.slots[asked];
      sample.history.push_back({"user", slot.question});
      sample.response = fill(slot.answer_template, slot.values[role.value_index[asked]]);
      dest.push_back(std::move(sample));
    }
  };

  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t idx = order[i];
    if (i < n_test) {
      out.test_roles.push_back(roles[idx]);
      make_dialogues(idx, out.test);
    } else if (i < n_test + n_valid) {
      out.valid_roles.push_back(roles[idx]);
      make_dialogues(idx, out.valid);
    } else {
      out.train_roles.push_back(roles[idx]);
      make_dialogues(idx, out.train);
    }
  }
  return out;
}

}  // namespace morpheus::corpus
