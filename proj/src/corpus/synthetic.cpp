#include <cstdio>

#include "mmk/corpus.hpp"
#include "mmk/rng.hpp"

namespace mmk {

// Knowledge descriptions deliberately share no token with the dialogue
// templates below, so the only query/entry overlap is the term itself.
// Symptom descriptions are short and diagnosis descriptions long: with
// equal idf on the term, that keeps every uttered symptom ranked above the
// diagnosis the doctor names.
const std::vector<DiagnosisProfile>& clinical_inventory() {
  static const std::vector<DiagnosisProfile> inv{
      {"influenza",
       "contagious viral infection causing systemic illness with sudden onset",
       "rest and fluids",
       {{"fever", "elevated temperature"}, {"chills", "shivering sensation"}, {"fatigue", "persistent tiredness"}}},
      {"migraine",
       "recurrent neurological disorder causing throbbing unilateral pain episodes",
       "a dark quiet room",
       {{"headache", "cranial pain"}, {"photophobia", "light sensitivity"}, {"nausea", "queasy stomach"}}},
      {"gastroenteritis",
       "inflammation of stomach lining often caused by viral infection",
       "oral rehydration",
       {{"diarrhea", "loose stools"}, {"vomiting", "forceful emesis"}, {"cramps", "abdominal spasms"}}},
      {"asthma",
       "chronic inflammatory airway disease with reversible bronchial narrowing",
       "an inhaler",
       {{"wheezing", "whistling respiration"}, {"breathlessness", "shortened respiration"}, {"cough", "airway reflex"}}},
      {"allergy",
       "immune hypersensitivity reaction triggered by harmless environmental allergens",
       "antihistamines",
       {{"sneezing", "nasal expulsion"}, {"itching", "skin irritation"}}},
      {"dermatitis",
       "inflammatory skin condition producing redness swelling plus scaling",
       "a moisturizing cream",
       {{"rash", "skin eruption"}, {"dryness", "moisture deficit"}}},
      {"anxiety",
       "psychological condition marked by excessive persistent fear or worry",
       "breathing exercises",
       {{"palpitations", "irregular heartbeat"}, {"insomnia", "disrupted sleep"}}},
      {"reflux",
       "chronic backflow of gastric acid into esophagus causing irritation",
       "smaller meals",
       {{"heartburn", "retrosternal burning"}, {"bloating", "abdominal distension"}}},
  };
  return inv;
}

std::string diagnosis_for(std::string_view symptom) {
  for (const auto& d : clinical_inventory())
    for (const auto& s : d.symptoms)
      if (s.symptom == symptom) return d.diagnosis;
  throw ConfigError("unknown symptom '" + std::string(symptom) + "'");
}

std::size_t symptom_index(std::string_view symptom) {
  std::size_t i = 0;
  for (const auto& d : clinical_inventory())
    for (const auto& s : d.symptoms) {
      if (s.symptom == symptom) return i;
      ++i;
    }
  throw ConfigError("unknown symptom '" + std::string(symptom) + "'");
}

namespace {

const std::vector<std::string> kDurations{"two days", "three days", "a week", "two weeks", "a month"};
const std::vector<std::string> kFillers{"it is getting worse .", "i am worried about it .", "it comes and goes ."};
const std::vector<std::string> kFollowUps{"i see . anything else ?", "please tell me more .", "how are you sleeping ?"};

std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += i + 1 == items.size() ? " and " : " , ";
    out += items[i];
  }
  return out;
}

}  // namespace

SyntheticCorpus generate_synthetic(std::size_t n, std::uint64_t seed, std::size_t d_vis) {
  if (n < 1) throw ConfigError("generate_synthetic: n must be >= 1");
  if (d_vis < 1) throw ConfigError("generate_synthetic: d_vis must be >= 1");
  const auto& inv = clinical_inventory();
  Rng rng(derive_seed(seed, 0));
  Rng noise(derive_seed(seed, 1));

  SyntheticCorpus out;
  for (const auto& d : inv) {
    for (const auto& s : d.symptoms) out.knowledge.push_back({s.symptom, s.description});
  }
  for (const auto& d : inv) out.knowledge.push_back({d.diagnosis, d.description});

  for (std::size_t i = 0; i < n; ++i) {
    const DiagnosisProfile& dx = inv[rng.below(inv.size())];
    std::vector<std::size_t> order(dx.symptoms.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    rng.shuffle(std::span<std::size_t>(order));
    const std::size_t n_sym = 1 + rng.below(std::min<std::size_t>(3, order.size()));
    SyntheticRecord rec;
    for (std::size_t k = 0; k < n_sym; ++k) rec.symptoms.push_back(dx.symptoms[order[k]].symptom);
    rec.diagnosis = dx.diagnosis;
    rec.duration = kDurations[rng.below(kDurations.size())];

    // Patient turns: first symptom, remaining symptoms one per turn, the
    // onset, then fillers up to 2..4 turns in total.
    std::vector<std::string> patient{"hello doctor , i have " + rec.symptoms[0] + " ."};
    for (std::size_t k = 1; k < n_sym; ++k) patient.push_back("i also have " + rec.symptoms[k] + " .");
    patient.push_back("it started " + rec.duration + " ago .");
    const std::size_t turns = std::max(patient.size(), 2 + rng.below(3));
    while (patient.size() < turns) patient.push_back(kFillers[rng.below(kFillers.size())]);

    Dialogue d;
    char id[64];
    std::snprintf(id, sizeof id, "synth-%llu-%05zu", static_cast<unsigned long long>(seed), i);
    d.id = id;
    for (std::size_t t = 0; t < patient.size(); ++t) {
      d.utterances.push_back({Speaker::Patient, patient[t]});
      std::string reply = t + 1 == patient.size()
                              ? "it looks like " + dx.diagnosis + " . i recommend " + dx.advice + " ."
                              : t == 0 ? "how long has this lasted ?" : kFollowUps[rng.below(kFollowUps.size())];
      d.utterances.push_back({Speaker::Doctor, reply});
    }

    std::vector<double> vis(d_vis, 0.0);
    for (const auto& s : rec.symptoms) vis[symptom_index(s) % d_vis] = 1.0;
    for (auto& v : vis) v += 0.1 * noise.normal();
    d.visual = std::move(vis);

    const std::string list = join_list(rec.symptoms);
    d.targets.mcs = "patient reports " + list + " for " + rec.duration + " .";
    d.targets.di = "doctor suspects " + dx.diagnosis + " and recommends " + dx.advice + " .";
    d.targets.summary = "patient reports " + list + " for " + rec.duration + " and was diagnosed with " + dx.diagnosis + " .";

    out.dialogues.push_back(std::move(d));
    out.records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace mmk
