#include "mmk/dialogue.hpp"

#include "mmk/errors.hpp"

namespace mmk {

std::string_view speaker_name(Speaker s) { return s == Speaker::Patient ? "patient" : "doctor"; }

Speaker parse_speaker(std::string_view label) {
  if (label == "patient") return Speaker::Patient;
  if (label == "doctor") return Speaker::Doctor;
  throw SchemaError("unknown speaker label '" + std::string(label) + "'");
}

std::string_view task_name(Task t) {
  switch (t) {
    case Task::Sum: return "sum";
    case Task::Mcs: return "mcs";
    case Task::Di: return "di";
  }
  return "?";
}

Task parse_task(std::string_view name) {
  if (name == "sum") return Task::Sum;
  if (name == "mcs") return Task::Mcs;
  if (name == "di") return Task::Di;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected sum, mcs or di)");
}

const std::string& target_text(const SummaryTriple& t, Task task) {
  switch (task) {
    case Task::Sum: return t.summary;
    case Task::Mcs: return t.mcs;
    case Task::Di: return t.di;
  }
  throw ContractError("unknown task");
}

TaskSet::TaskSet(std::initializer_list<Task> tasks) {
  for (Task t : tasks) insert(t);
}

TaskSet TaskSet::parse(std::string_view list) {
  TaskSet set;
  std::size_t start = 0;
  while (start <= list.size()) {
    std::size_t comma = list.find(',', start);
    std::string_view item = list.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) set.insert(parse_task(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (set.empty()) throw ConfigError("task list is empty");
  return set;
}

std::vector<Task> TaskSet::tasks() const {
  std::vector<Task> out;
  for (Task t : kAllTasks)
    if (contains(t)) out.push_back(t);
  return out;
}

std::size_t TaskSet::size() const {
  std::size_t n = 0;
  for (bool b : bits_) n += b ? 1 : 0;
  return n;
}

std::string TaskSet::str() const {
  std::string out;
  for (Task t : tasks()) {
    if (!out.empty()) out += ',';
    out += task_name(t);
  }
  return out;
}

}  // namespace mmk
